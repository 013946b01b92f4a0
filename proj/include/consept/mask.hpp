#pragma once

#include <cstdint>
#include <vector>

namespace consept {

// Integer label mask; 0 is background, 255 the ignore label.
struct LabelMask {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> labels;

    LabelMask() = default;
    LabelMask(int h_, int w_) : h(h_), w(w_), labels(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
    size_t size() const { return labels.size(); }

    // nearest-neighbour downsample (used to bring masks to loss resolution)
    LabelMask resized_nearest(int out_h, int out_w) const {
        LabelMask out(out_h, out_w);
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                int sy = static_cast<int>((static_cast<double>(y) + 0.5) * h / out_h);
                int sx = static_cast<int>((static_cast<double>(x) + 0.5) * w / out_w);
                out.at(y, x) = at(std::min(sy, h - 1), std::min(sx, w - 1));
            }
        return out;
    }
};

inline constexpr int kIgnoreLabel = 255;

}  // namespace consept
