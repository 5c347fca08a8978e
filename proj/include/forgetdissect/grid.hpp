#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "forgetdissect/error.hpp"

namespace forgetdissect {

/// Row-major, channel-last 2-D grid.
template <class T>
struct Grid {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<T> data;

    Grid() = default;
    Grid(int h, int w, int c = 1, T fill = T{})
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return data.size(); }

    T& at(int r, int c, int ch = 0) {
        return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
    }
    const T& at(int r, int c, int ch = 0) const {
        return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
    }

    bool same_shape(const Grid& other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }

    friend bool operator==(const Grid&, const Grid&) = default;
};

using Image = Grid<float>;         // values in [0, 1], 3 channels
using Mask = Grid<std::uint8_t>;   // 0/1, 1 channel
using ScoreGrid = Grid<double>;    // signed relevance, 1 channel

inline std::size_t count_set(const Mask& mask) {
    std::size_t n = 0;
    for (auto v : mask.data) n += v != 0;
    return n;
}

}  // namespace forgetdissect
