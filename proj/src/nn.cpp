#include "apod/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace apod::nn {

namespace {

const char* activation_name(Activation a) {
    return a == Activation::relu ? "relu" : "identity";
}

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw InputError("unknown activation '" + s + "' in checkpoint");
}

void check_labels(const Matrix& logits, std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
        throw ConfigError("label count " + std::to_string(labels.size()) +
                          " does not match logit rows " + std::to_string(logits.rows()));
    }
    for (int y : labels) {
        if (y < 0 || y >= logits.cols()) {
            throw InputError("label " + std::to_string(y) + " out of range for " +
                             std::to_string(logits.cols()) + " classes");
        }
    }
}

}  // namespace

Gradients& Gradients::operator+=(const Gradients& other) {
    if (other.layers.size() != layers.size()) {
        throw ConfigError("gradient sets have different layer counts");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].weight += other.layers[i].weight;
        layers[i].bias += other.layers[i].bias;
    }
    if (input.size() == other.input.size() && input.size() > 0) {
        input += other.input;
    }
    return *this;
}

Gradients& Gradients::operator*=(double factor) {
    for (auto& g : layers) {
        g.weight *= factor;
        g.bias *= factor;
    }
    input *= factor;
    return *this;
}

bool Gradients::all_finite() const {
    return std::all_of(layers.begin(), layers.end(), [](const LayerGrad& g) {
        return g.weight.allFinite() && g.bias.allFinite();
    });
}

double Gradients::max_abs() const {
    double m = 0.0;
    for (const auto& g : layers) {
        if (g.weight.size() > 0) m = std::max(m, g.weight.cwiseAbs().maxCoeff());
        if (g.bias.size() > 0) m = std::max(m, g.bias.cwiseAbs().maxCoeff());
    }
    return m;
}

DenseNet::DenseNet(std::vector<DenseLayer> layers, double dropout_prob)
    : layers_(std::move(layers)), dropout_prob_(dropout_prob) {
    if (layers_.empty()) throw ConfigError("DenseNet needs at least one layer");
    if (dropout_prob_ < 0.0 || dropout_prob_ >= 1.0) {
        throw ConfigError("dropout probability must be in [0, 1)");
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.bias.size() != l.weight.cols()) {
            throw ConfigError("layer " + std::to_string(i) + ": bias size != output dim");
        }
        if (i > 0 && layers_[i - 1].out_dim() != l.in_dim()) {
            throw ConfigError("layer " + std::to_string(i) + ": input dim " +
                              std::to_string(l.in_dim()) + " does not chain with previous output " +
                              std::to_string(layers_[i - 1].out_dim()));
        }
    }
}

DenseNet DenseNet::mlp(std::span<const int> dims, Activation hidden, Activation output,
                       double dropout_prob, Rng& rng) {
    if (dims.size() < 2) throw ConfigError("mlp needs at least input and output dims");
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const int in = dims[i];
        const int out = dims[i + 1];
        if (in <= 0 || out <= 0) throw ConfigError("layer dims must be positive");
        const Activation act = (i + 2 == dims.size()) ? output : hidden;
        // Kaiming-uniform: Var(w) = gain^2 / fan_in with gain^2 = 2 for ReLU.
        const double gain2 = act == Activation::relu ? 2.0 : 1.0;
        const double bound = std::sqrt(3.0 * gain2 / in);
        std::uniform_real_distribution<double> dist(-bound, bound);
        DenseLayer layer;
        layer.weight.resize(in, out);
        for (Eigen::Index r = 0; r < in; ++r) {
            for (Eigen::Index c = 0; c < out; ++c) layer.weight(r, c) = dist(rng);
        }
        layer.bias = RowVector::Zero(out);
        layer.activation = act;
        layers.push_back(std::move(layer));
    }
    return DenseNet(std::move(layers), dropout_prob);
}

int DenseNet::input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }

int DenseNet::output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t DenseNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

std::vector<DenseLayer>& DenseNet::mutable_layers() {
    ++version_;
    return layers_;
}

bool DenseNet::all_finite() const {
    return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
        return l.weight.allFinite() && l.bias.allFinite();
    });
}

ForwardResult DenseNet::forward(const Matrix& batch, Rng* rng) const {
    return forward_impl(batch, rng, mode_);
}

Matrix DenseNet::predict(const Matrix& batch) const {
    return forward_impl(batch, nullptr, Mode::eval).output;
}

ForwardResult DenseNet::forward_impl(const Matrix& batch, Rng* rng, Mode mode) const {
    if (layers_.empty()) throw ConfigError("forward on an empty network");
    if (batch.cols() != input_dim()) {
        throw ConfigError("batch has " + std::to_string(batch.cols()) +
                          " columns, network expects " + std::to_string(input_dim()));
    }
    if (!batch.allFinite()) throw InputError("non-finite value in forward input");

    const bool use_dropout = mode == Mode::train && dropout_prob_ > 0.0;
    if (use_dropout && rng == nullptr) {
        throw StateError("train-mode forward with dropout requires an rng");
    }

    ForwardResult result;
    auto& cache = result.cache;
    cache.net_version = version_;
    cache.inputs.reserve(layers_.size());
    cache.pre_activations.reserve(layers_.size());
    cache.dropout_masks.resize(layers_.size());

    Matrix current = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& layer = layers_[i];
        Matrix z = current * layer.weight;
        z.rowwise() += layer.bias;
        cache.inputs.push_back(std::move(current));
        Matrix a = layer.activation == Activation::relu ? Matrix(z.cwiseMax(0.0)) : z;
        cache.pre_activations.push_back(std::move(z));
        if (use_dropout && i + 1 < layers_.size()) {
            const double keep = 1.0 - dropout_prob_;
            std::bernoulli_distribution draw(keep);
            Matrix mask(a.rows(), a.cols());
            for (Eigen::Index r = 0; r < mask.rows(); ++r) {
                for (Eigen::Index c = 0; c < mask.cols(); ++c) {
                    mask(r, c) = draw(*rng) ? 1.0 / keep : 0.0;
                }
            }
            a = a.cwiseProduct(mask);
            cache.dropout_masks[i] = std::move(mask);
        }
        current = std::move(a);
    }
    result.output = std::move(current);
    return result;
}

Gradients DenseNet::backward(const ForwardCache& cache, const Matrix& output_grad) const {
    if (cache.net_version != version_ || cache.inputs.size() != layers_.size()) {
        throw StateError("stale forward cache: parameters changed since the forward pass");
    }
    const Eigen::Index n = cache.inputs.front().rows();
    if (output_grad.rows() != n || output_grad.cols() != output_dim()) {
        throw ConfigError("loss gradient shape does not match network output");
    }

    Gradients grads;
    grads.layers.resize(layers_.size());
    Matrix delta = output_grad;  // d loss / d (post-dropout activation of layer i)
    for (std::size_t k = layers_.size(); k-- > 0;) {
        const auto& layer = layers_[k];
        if (cache.dropout_masks[k].size() > 0) delta = delta.cwiseProduct(cache.dropout_masks[k]);
        if (layer.activation == Activation::relu) {
            const Matrix& z = cache.pre_activations[k];
            delta = delta.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
        }
        grads.layers[k].weight = cache.inputs[k].transpose() * delta;
        grads.layers[k].bias = delta.colwise().sum();
        delta = delta * layer.weight.transpose();
    }
    grads.input = std::move(delta);
    return grads;
}

Gradients zero_gradients(const DenseNet& net) {
    Gradients g;
    for (const auto& l : net.layers()) {
        g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()),
                            RowVector::Zero(l.bias.size())});
    }
    return g;
}

AdamState AdamState::for_net(const DenseNet& net, AdamConfig config) {
    if (!(config.lr >= 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
        !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.eps > 0.0)) {
        throw ConfigError("invalid Adam hyperparameters");
    }
    AdamState s;
    s.config = config;
    s.first_moment = zero_gradients(net).layers;
    s.second_moment = zero_gradients(net).layers;
    return s;
}

void adam_step(DenseNet& net, const Gradients& grads, AdamState& state) {
    const auto& layers = net.layers();
    if (grads.layers.size() != layers.size() || state.first_moment.size() != layers.size()) {
        throw ConfigError("adam_step: gradient/state layer count mismatch");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (grads.layers[i].weight.rows() != layers[i].weight.rows() ||
            grads.layers[i].weight.cols() != layers[i].weight.cols() ||
            grads.layers[i].bias.size() != layers[i].bias.size()) {
            throw ConfigError("adam_step: gradient shape mismatch at layer " + std::to_string(i));
        }
    }
    if (!grads.all_finite()) {
        throw NumericError("adam_step: non-finite gradient, update rejected");
    }

    const auto& c = state.config;
    const std::int64_t t = state.step_count + 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
        param.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
    };
    auto& mut = net.mutable_layers();
    for (std::size_t i = 0; i < mut.size(); ++i) {
        update(mut[i].weight, grads.layers[i].weight, state.first_moment[i].weight,
               state.second_moment[i].weight);
        update(mut[i].bias, grads.layers[i].bias, state.first_moment[i].bias,
               state.second_moment[i].bias);
    }
    state.step_count = t;
}

Matrix softmax(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - m).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

Vector log_softmax_at(const Matrix& logits, std::span<const int> labels) {
    check_labels(logits, labels);
    Vector out(logits.rows());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
        out(r) = logits(r, labels[static_cast<std::size_t>(r)]) - lse;
    }
    return out;
}

Vector per_instance_cross_entropy(const Matrix& logits, std::span<const int> labels) {
    return -log_softmax_at(logits, labels);
}

LossResult weighted_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                  std::span<const double> weights) {
    check_labels(logits, labels);
    if (static_cast<Eigen::Index>(weights.size()) != logits.rows()) {
        throw ConfigError("weight count does not match logit rows");
    }
    const Vector ce = per_instance_cross_entropy(logits, labels);
    LossResult r;
    r.grad = softmax(logits);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        r.loss += weights[k] * ce(i);
        r.grad(i, labels[k]) -= 1.0;
        r.grad.row(i) *= weights[k];
    }
    return r;
}

LossResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
    check_labels(logits, labels);
    LossResult r;
    const auto n = logits.rows();
    if (n == 0) {
        r.grad = Matrix::Zero(0, logits.cols());
        return r;
    }
    const Vector ce = per_instance_cross_entropy(logits, labels);
    r.loss = ce.mean();
    r.grad = softmax(logits);
    for (Eigen::Index i = 0; i < n; ++i) r.grad(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    r.grad /= static_cast<double>(n);
    return r;
}

LossResult generalized_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                     double q) {
    check_labels(logits, labels);
    if (!(q > 0.0)) throw ConfigError("GCE exponent q must be positive");
    LossResult r;
    const auto n = logits.rows();
    r.grad = Matrix::Zero(n, logits.cols());
    if (n == 0) return r;
    const Matrix p = softmax(logits);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        const double py_q = std::pow(p(i, y), q);
        r.loss += (1.0 - py_q) / q;
        // d/dz_k [-(p_y^q)/q] = -p_y^q (1[k==y] - p_k)
        for (Eigen::Index k = 0; k < logits.cols(); ++k) {
            r.grad(i, k) = -py_q * ((k == y ? 1.0 : 0.0) - p(i, k));
        }
    }
    r.loss /= static_cast<double>(n);
    r.grad /= static_cast<double>(n);
    return r;
}

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        logits.row(r).maxCoeff(&best);  // first maximum on ties
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

void save_net(const DenseNet& net, std::ostream& out) {
    out.precision(std::numeric_limits<double>::max_digits10);
    out << "apod-densenet 1\n";
    out << net.layers().size() << ' ' << net.dropout_prob() << '\n';
    for (const auto& l : net.layers()) {
        out << "layer " << l.in_dim() << ' ' << l.out_dim() << ' ' << activation_name(l.activation)
            << '\n';
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
                out << l.weight(r, c) << (c + 1 == l.weight.cols() ? '\n' : ' ');
            }
        }
        for (Eigen::Index c = 0; c < l.bias.size(); ++c) {
            out << l.bias(c) << (c + 1 == l.bias.size() ? '\n' : ' ');
        }
    }
    if (!out) throw std::runtime_error("failed writing network checkpoint");
}

DenseNet load_net(std::istream& in) {
    std::string magic;
    int format = 0;
    in >> magic >> format;
    if (magic != "apod-densenet" || format != 1) {
        throw InputError("not an apod-densenet v1 checkpoint");
    }
    std::size_t n_layers = 0;
    double dropout = 0.0;
    in >> n_layers >> dropout;
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i < n_layers; ++i) {
        std::string tag, act;
        int rows = 0, cols = 0;
        in >> tag >> rows >> cols >> act;
        if (!in || tag != "layer" || rows <= 0 || cols <= 0) {
            throw InputError("malformed layer header in checkpoint");
        }
        DenseLayer l;
        l.activation = parse_activation(act);
        l.weight.resize(rows, cols);
        l.bias.resize(cols);
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) in >> l.weight(r, c);
        }
        for (int c = 0; c < cols; ++c) in >> l.bias(c);
        if (!in) throw InputError("truncated checkpoint");
        layers.push_back(std::move(l));
    }
    return DenseNet(std::move(layers), dropout);
}

void save_net(const DenseNet& net, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    save_net(net, out);
}

DenseNet load_net(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open checkpoint " + path.string());
    return load_net(in);
}

std::uint64_t parameter_digest(const DenseNet& net) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const double* data, Eigen::Index count) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& l : net.layers()) {
        mix(l.weight.data(), l.weight.size());
        mix(l.bias.data(), l.bias.size());
    }
    return h;
}

}  // namespace apod::nn
