#pragma once

// Plain-double reference computations shared by the unit tests and the
// acceptance suite. None of them touch the tape.

#include <algorithm>
#include <cmath>
#include <vector>

#include "augsearch/tensor.hpp"
#include "augsearch/transforms.hpp"

namespace augsearch::testing {

inline std::vector<std::vector<double>> sinkhorn_oracle(std::vector<std::vector<double>> m, int iterations) {
    const std::size_t n = m.size();
    for (int l = 0; l < iterations; ++l) {
        for (auto& row : m) {
            double s = 0;
            for (double v : row) s += v;
            for (double& v : row) v /= s;
        }
        for (std::size_t c = 0; c < n; ++c) {
            double s = 0;
            for (std::size_t r = 0; r < n; ++r) s += m[r][c];
            for (std::size_t r = 0; r < n; ++r) m[r][c] /= s;
        }
    }
    return m;
}

/// max |row sum - 1| + max |column sum - 1| of a square matrix.
inline double marginal_deviation(const Tensor& m) {
    const std::size_t n = m.dim(0);
    double row = 0, col = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double rs = 0, cs = 0;
        for (std::size_t j = 0; j < n; ++j) {
            rs += m.at(i, j);
            cs += m.at(j, i);
        }
        row = std::max(row, std::abs(rs - 1));
        col = std::max(col, std::abs(cs - 1));
    }
    return row + col;
}

/// Composes the chosen transforms in layer order.
inline Tensor sequential_oracle(const Tensor& x0, const std::vector<std::size_t>& layers,
                                const std::vector<std::size_t>& rows, const Tensor& m) {
    Tensor x = x0;
    for (std::size_t k : layers) {
        const auto& s = transforms::registry()[rows[k]];
        x = transforms::apply_value(s, x, m.at(rows[k], k));
    }
    return x;
}

/// 1 - n!/((n-k)! n^k): chance that k uniform draws over n types repeat.
inline double birthday_repeat(int n, int k) {
    double distinct = 1.0;
    for (int i = 0; i < k; ++i) distinct *= static_cast<double>(n - i) / n;
    return 1.0 - distinct;
}

}  // namespace augsearch::testing
