#pragma once

// Dense feed-forward networks with hand-derived gradients, Adam, and the
// classification losses used by the trainers.

#include "apod/common.hpp"

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace apod::nn {

enum class Activation { identity, relu };
enum class Mode { train, eval };

struct DenseLayer {
    Matrix weight;  // in x out
    RowVector bias;  // out
    Activation activation = Activation::identity;

    int in_dim() const { return static_cast<int>(weight.rows()); }
    int out_dim() const { return static_cast<int>(weight.cols()); }
};

struct LayerGrad {
    Matrix weight;
    RowVector bias;
};

struct Gradients {
    std::vector<LayerGrad> layers;
    Matrix input;  // d loss / d input batch

    Gradients& operator+=(const Gradients& other);
    Gradients& operator*=(double factor);
    bool all_finite() const;
    double max_abs() const;
};

/// Everything backward() needs from a forward pass.
struct ForwardCache {
    std::uint64_t net_version = 0;
    std::vector<Matrix> inputs;       // input to layer i
    std::vector<Matrix> pre_activations;
    std::vector<Matrix> dropout_masks;  // empty matrix where no dropout was applied
};

struct ForwardResult {
    Matrix output;
    ForwardCache cache;
};

class DenseNet {
public:
    DenseNet() = default;
    DenseNet(std::vector<DenseLayer> layers, double dropout_prob);

    /// Builds layers dims[0] -> dims[1] -> ... -> dims.back(). Hidden layers use
    /// `hidden`, the last layer uses `output`. Weights are Kaiming-uniform in
    /// the fan-in, biases start at zero.
    static DenseNet mlp(std::span<const int> dims, Activation hidden, Activation output,
                        double dropout_prob, Rng& rng);

    int input_dim() const;
    int output_dim() const;
    std::size_t parameter_count() const;

    Mode mode() const { return mode_; }
    void set_mode(Mode mode) { mode_ = mode; }
    double dropout_prob() const { return dropout_prob_; }

    /// Dropout is applied after the activation of every non-final layer in
    /// train mode; `rng` must be supplied when that can happen.
    ForwardResult forward(const Matrix& batch, Rng* rng = nullptr) const;

    /// Eval-mode output, independent of the current mode.
    Matrix predict(const Matrix& batch) const;

    Gradients backward(const ForwardCache& cache, const Matrix& output_grad) const;

    const std::vector<DenseLayer>& layers() const { return layers_; }
    /// Mutable access invalidates outstanding caches.
    std::vector<DenseLayer>& mutable_layers();

    std::uint64_t version() const { return version_; }
    void bump_version() { ++version_; }

    bool all_finite() const;

private:
    ForwardResult forward_impl(const Matrix& batch, Rng* rng, Mode mode) const;

    std::vector<DenseLayer> layers_;
    double dropout_prob_ = 0.0;
    Mode mode_ = Mode::train;
    std::uint64_t version_ = 1;
};

Gradients zero_gradients(const DenseNet& net);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::int64_t step_count = 0;
    std::vector<LayerGrad> first_moment;
    std::vector<LayerGrad> second_moment;

    static AdamState for_net(const DenseNet& net, AdamConfig config = {});
};

/// Bias-corrected Adam update. Throws NumericError and leaves both the
/// parameters and the state untouched if any gradient entry is non-finite.
void adam_step(DenseNet& net, const Gradients& grads, AdamState& state);

struct LossResult {
    double loss = 0.0;
    Matrix grad;  // d loss / d logits
};

Matrix softmax(const Matrix& logits);
Vector log_softmax_at(const Matrix& logits, std::span<const int> labels);

/// Mean softmax cross-entropy over rows.
LossResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels);

/// sum_i weights[i] * ce_i. Weights are treated as constants.
LossResult weighted_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                  std::span<const double> weights);

Vector per_instance_cross_entropy(const Matrix& logits, std::span<const int> labels);

/// Mean generalized cross-entropy (1 - p_y^q) / q.
LossResult generalized_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                     double q);

std::vector<int> argmax_rows(const Matrix& logits);

// Checkpoint container, text format:
//   apod-densenet 1
//   <n_layers> <dropout_prob>
//   layer <in> <out> <identity|relu>
//   <in*out weights, row-major> <out biases>
//   ...
// Values are written with max_digits10 so save/load is exact.
void save_net(const DenseNet& net, std::ostream& out);
DenseNet load_net(std::istream& in);
void save_net(const DenseNet& net, const std::filesystem::path& path);
DenseNet load_net(const std::filesystem::path& path);

/// FNV-1a over the raw parameter bytes.
std::uint64_t parameter_digest(const DenseNet& net);

}  // namespace apod::nn
