#pragma once

#include <cstdint>
#include <vector>

#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"

namespace connrsfm {

/// Point tracks across frames, in normalized retinal coordinates. Slot
/// (point, frame) is meaningful only when `visible(point, frame)`.
struct TrackSet {
    int n_frames = 0;
    int n_points = 0;
    std::vector<PixelPoint> pixels;
    std::vector<std::uint8_t> mask;

    TrackSet() = default;
    TrackSet(int frames, int points)
        : n_frames(frames),
          n_points(points),
          pixels(static_cast<std::size_t>(frames) * points),
          mask(static_cast<std::size_t>(frames) * points, 0) {}

    std::size_t slot(int point, int frame) const { return static_cast<std::size_t>(point) * n_frames + frame; }

    const PixelPoint& at(int point, int frame) const { return pixels[slot(point, frame)]; }
    PixelPoint& at(int point, int frame) { return pixels[slot(point, frame)]; }
    bool visible(int point, int frame) const { return mask[slot(point, frame)] != 0; }
    void set_visible(int point, int frame, bool v) { mask[slot(point, frame)] = v ? 1 : 0; }

    int views(int point) const {
        int n = 0;
        for (int f = 0; f < n_frames; ++f) n += visible(point, f) ? 1 : 0;
        return n;
    }

    std::size_t observation_count() const {
        std::size_t n = 0;
        for (auto m : mask) n += m;
        return n;
    }
};

}  // namespace connrsfm
