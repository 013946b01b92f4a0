#pragma once

#include <string>

#include "consept/model.hpp"

namespace consept::model {

// Single-file container: magic "CONSEPT1", a JSON header describing the
// config and every parameter group (name, shape, flags), then the raw
// little-endian float32 payload in header order.
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace consept::model
