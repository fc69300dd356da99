#pragma once

// Independent reference implementations used by unit and acceptance tests.
// Nothing here calls into the code under test except to read parameters.

#include "apod/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

namespace oracle {

using apod::Matrix;

/// Central differences over every parameter of `net`; `loss` is evaluated on
/// a perturbed copy. Returns per-layer weight and bias gradients.
inline std::vector<apod::nn::LayerGrad> numeric_gradient(const apod::nn::DenseNet& net,
                                                         const std::function<double(const apod::nn::DenseNet&)>& loss,
                                                         double h = 1e-5) {
    std::vector<apod::nn::LayerGrad> out;
    apod::nn::DenseNet probe = net;
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
        const auto& layer = net.layers()[l];
        apod::nn::LayerGrad g{Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                              apod::RowVector::Zero(layer.bias.size())};
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
                const double w0 = layer.weight(i, j);
                probe.mutable_layers()[l].weight(i, j) = w0 + h;
                const double up = loss(probe);
                probe.mutable_layers()[l].weight(i, j) = w0 - h;
                const double down = loss(probe);
                probe.mutable_layers()[l].weight(i, j) = w0;
                g.weight(i, j) = (up - down) / (2.0 * h);
            }
        }
        for (Eigen::Index j = 0; j < layer.bias.size(); ++j) {
            const double b0 = layer.bias(j);
            probe.mutable_layers()[l].bias(j) = b0 + h;
            const double up = loss(probe);
            probe.mutable_layers()[l].bias(j) = b0 - h;
            const double down = loss(probe);
            probe.mutable_layers()[l].bias(j) = b0;
            g.bias(j) = (up - down) / (2.0 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries that are zero up
/// to finite-difference noise from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

inline double max_relative_error(const std::vector<apod::nn::LayerGrad>& analytic,
                                 const std::vector<apod::nn::LayerGrad>& numeric, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t l = 0; l < analytic.size(); ++l) {
        for (Eigen::Index i = 0; i < analytic[l].weight.size(); ++i) {
            worst = std::max(worst, relative_error(analytic[l].weight.data()[i], numeric[l].weight.data()[i], floor));
        }
        for (Eigen::Index i = 0; i < analytic[l].bias.size(); ++i) {
            worst = std::max(worst, relative_error(analytic[l].bias(i), numeric[l].bias(i), floor));
        }
    }
    return worst;
}

/// Straight-line evaluation of an MLP without dropout.
inline Matrix forward_plain(const apod::nn::DenseNet& net, const Matrix& x) {
    Matrix cur = x;
    for (const auto& layer : net.layers()) {
        Matrix next(cur.rows(), layer.weight.cols());
        for (Eigen::Index r = 0; r < cur.rows(); ++r) {
            for (Eigen::Index o = 0; o < layer.weight.cols(); ++o) {
                long double s = layer.bias(o);
                for (Eigen::Index k = 0; k < cur.cols(); ++k) s += (long double)cur(r, k) * layer.weight(k, o);
                double v = static_cast<double>(s);
                if (layer.activation == apod::nn::Activation::relu) v = std::max(0.0, v);
                next(r, o) = v;
            }
        }
        cur = std::move(next);
    }
    return cur;
}

/// Mean cross-entropy in extended precision.
inline double cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    long double total = 0.0L;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        long double mx = -std::numeric_limits<long double>::infinity();
        for (Eigen::Index k = 0; k < logits.cols(); ++k) mx = std::max(mx, (long double)logits(r, k));
        long double z = 0.0L;
        for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp((long double)logits(r, k) - mx);
        total += -((long double)logits(r, labels[r]) - mx - std::log(z));
    }
    return static_cast<double>(total / logits.rows());
}

inline double gce(const Matrix& logits, const std::vector<int>& labels, double q) {
    long double total = 0.0L;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        long double z = 0.0L;
        for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp((long double)logits(r, k));
        const long double p = std::exp((long double)logits(r, labels[r])) / z;
        total += (1.0L - std::pow(p, (long double)q)) / q;
    }
    return static_cast<double>(total / logits.rows());
}

/// counts[a][y][yhat] by enumeration over all triples.
inline std::array<std::array<std::array<long, 2>, 2>, 2> confusion(const std::vector<int>& pred,
                                                                  const std::vector<int>& y,
                                                                  const std::vector<int>& a) {
    std::array<std::array<std::array<long, 2>, 2>, 2> c{};
    for (int ga = 0; ga < 2; ++ga)
        for (int gy = 0; gy < 2; ++gy)
            for (int gp = 0; gp < 2; ++gp)
                for (std::size_t i = 0; i < pred.size(); ++i)
                    if (a[i] == ga && y[i] == gy && pred[i] == gp) ++c[ga][gy][gp];
    return c;
}

/// Mean margin f1 - f0 over (a, y), nullopt when empty.
inline std::array<std::array<std::optional<double>, 2>, 2> relaxed(const Matrix& logits, const std::vector<int>& y,
                                                                  const std::vector<int>& a) {
    std::array<std::array<std::optional<double>, 2>, 2> out{};
    for (int ga = 0; ga < 2; ++ga) {
        for (int gy = 0; gy < 2; ++gy) {
            long double s = 0.0L;
            long n = 0;
            for (std::size_t i = 0; i < y.size(); ++i) {
                if (a[i] != ga || y[i] != gy) continue;
                s += (long double)logits(i, 1) - (long double)logits(i, 0);
                ++n;
            }
            if (n) out[ga][gy] = static_cast<double>(s / n);
        }
    }
    return out;
}

inline double distance(const Matrix& e, long i, long j) {
    long double s = 0.0L;
    for (Eigen::Index k = 0; k < e.cols(); ++k) {
        const long double d = (long double)e(i, k) - e(j, k);
        s += d * d;
    }
    return static_cast<double>(std::sqrt(s));
}

struct MaxMin {
    long id = -1;
    double distance = -1.0;
};

/// Brute-force argmax_i min_j distance, ties to the smallest id.
inline MaxMin max_min(const std::vector<long>& candidates, const std::vector<long>& annotated, const Matrix& e) {
    MaxMin best;
    std::vector<long> sorted = candidates;
    std::sort(sorted.begin(), sorted.end());
    for (long i : sorted) {
        double nearest = std::numeric_limits<double>::infinity();
        for (long j : annotated) nearest = std::min(nearest, distance(e, i, j));
        if (nearest > best.distance) best = {i, nearest};
    }
    return best;
}

inline double cover_radius(const std::vector<long>& pool, const std::vector<long>& annotated, const Matrix& e) {
    double r = 0.0;
    for (long i : pool) {
        double nearest = std::numeric_limits<double>::infinity();
        for (long j : annotated) nearest = std::min(nearest, distance(e, i, j));
        r = std::max(r, nearest);
    }
    return r;
}

/// Hand-centred argmin over the fixed order (0,0), (0,1), (1,0), (1,1).
inline std::pair<int, int> worst_subgroup(const std::array<std::array<double, 2>, 2>& acc) {
    std::pair<int, int> best{-1, -1};
    double best_v = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 2; ++a) {
        for (int c = 0; c < 2; ++c) {
            const double v = acc[a][c] - 0.5 * (acc[0][c] + acc[1][c]);
            if (v < best_v) {
                best_v = v;
                best = {a, c};
            }
        }
    }
    return best;
}

inline double entropy_bits(double p1) {
    double h = 0.0;
    for (double p : {p1, 1.0 - p1}) {
        if (p > 0.0) h -= p * std::log(p) / std::log(2.0);
    }
    return h;
}

}  // namespace oracle
