#pragma once

#include "sscdl/autodiff.hpp"
#include "sscdl/graph.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

// Encoder stack: gcn_layers rounds of sum-normalized message passing, each
// relu(batchnorm(spmm(adj, X) * W)), a sum readout per graph, an MLP of the
// same shape on the pooled rows, then two heads: a linear classifier and a
// bias-free two-layer projection for the contrastive losses. No layer has a
// bias term; batchnorm supplies the shift where enabled.
namespace sscdl {

struct ModelConfig {
    int input_dim = 0;
    int n_classes = 0;
    int gcn_layers = 3;
    int hidden_dim = 64;
    int mlp_layers = 2;
    int projection_dim = 64;
    bool use_batchnorm = true;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    void validate() const {
        if (input_dim < 1) throw ConfigError("model: input_dim must be positive");
        if (n_classes < 2) throw ConfigError("model: n_classes must be at least 2");
        if (gcn_layers < 1) throw ConfigError("model: gcn_layers must be at least 1");
        if (hidden_dim < 1) throw ConfigError("model: hidden_dim must be positive");
        if (mlp_layers < 1) throw ConfigError("model: mlp_layers must be at least 1");
        if (projection_dim < 1) throw ConfigError("model: projection_dim must be positive");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return nlohmann::json{{"input_dim", c.input_dim},
                          {"n_classes", c.n_classes},
                          {"gcn_layers", c.gcn_layers},
                          {"hidden_dim", c.hidden_dim},
                          {"mlp_layers", c.mlp_layers},
                          {"projection_dim", c.projection_dim},
                          {"use_batchnorm", c.use_batchnorm},
                          {"bn_eps", c.bn_eps},
                          {"bn_momentum", c.bn_momentum}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.input_dim = j.at("input_dim").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.gcn_layers = j.at("gcn_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.mlp_layers = j.at("mlp_layers").get<int>();
    c.projection_dim = j.at("projection_dim").get<int>();
    c.use_batchnorm = j.at("use_batchnorm").get<bool>();
    c.bn_eps = j.at("bn_eps").get<double>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    return c;
}

inline std::uint64_t model_fingerprint(const ModelConfig& c) {
    return fnv1a64(to_json(c).dump());
}

// Trainable tensors in a fixed order plus batchnorm running buffers (not
// optimized, updated only by training-mode forward passes on the original
// view).
struct ModelParams {
    ModelConfig config;
    std::vector<std::string> names;
    std::vector<Matrix> tensors;
    std::vector<Eigen::RowVectorXd> running_mean;  // one per batchnorm site
    std::vector<Eigen::RowVectorXd> running_var;

    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        throw ConfigError("ModelParams: no tensor named " + name);
    }
    const Matrix& tensor(const std::string& name) const {
        return tensors[static_cast<std::size_t>(index_of(name))];
    }
    Matrix& tensor(const std::string& name) {
        return tensors[static_cast<std::size_t>(index_of(name))];
    }
    int n_batchnorm_sites() const { return static_cast<int>(running_mean.size()); }
};

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    Rng rng(derive_seed(seed, "init"));
    auto weight = [&](const std::string& name, int rows, int cols) {
        double bound = 1.0 / std::sqrt(static_cast<double>(rows));
        Matrix w(rows, cols);
        for (int j = 0; j < cols; ++j)
            for (int i = 0; i < rows; ++i) w(i, j) = (2.0 * rng.next_unit() - 1.0) * bound;
        p.names.push_back(name);
        p.tensors.push_back(std::move(w));
    };
    auto batchnorm = [&](const std::string& prefix, int dim) {
        p.names.push_back(prefix + ".bn.scale");
        p.tensors.push_back(Matrix::Ones(1, dim));
        p.names.push_back(prefix + ".bn.shift");
        p.tensors.push_back(Matrix::Zero(1, dim));
        p.running_mean.push_back(Eigen::RowVectorXd::Zero(dim));
        p.running_var.push_back(Eigen::RowVectorXd::Ones(dim));
    };
    for (int l = 0; l < cfg.gcn_layers; ++l) {
        const std::string prefix = "gcn" + std::to_string(l);
        weight(prefix + ".weight", l == 0 ? cfg.input_dim : cfg.hidden_dim, cfg.hidden_dim);
        if (cfg.use_batchnorm) batchnorm(prefix, cfg.hidden_dim);
    }
    for (int l = 0; l < cfg.mlp_layers; ++l) {
        const std::string prefix = "mlp" + std::to_string(l);
        weight(prefix + ".weight", cfg.hidden_dim, cfg.hidden_dim);
        if (cfg.use_batchnorm) batchnorm(prefix, cfg.hidden_dim);
    }
    weight("classifier.weight", cfg.hidden_dim, cfg.n_classes);
    weight("proj.w1", cfg.hidden_dim, cfg.projection_dim);
    weight("proj.w2", cfg.projection_dim, cfg.projection_dim);
    return p;
}

// Tape handles for every trainable tensor. All forward passes in one
// training step must share a single binding so the three views accumulate
// into the same gradients.
struct BoundParams {
    ModelParams* source = nullptr;
    std::vector<ad::Var> tensors;

    ad::Var operator[](const std::string& name) const {
        return tensors[static_cast<std::size_t>(source->index_of(name))];
    }
};

inline BoundParams bind(ad::Tape& tape, ModelParams& params, bool trainable = true) {
    BoundParams b;
    b.source = &params;
    b.tensors.reserve(params.tensors.size());
    for (const Matrix& t : params.tensors)
        b.tensors.push_back(trainable ? tape.param(t) : tape.constant(t));
    return b;
}

struct ForwardMode {
    bool training = true;
    bool update_running_stats = false;
    double* relu_margin = nullptr;  // when set, collects min |pre-activation| over relu sites
};

namespace detail {

inline ad::Var apply_batchnorm(const BoundParams& bound, const std::string& prefix,
                               int site, ad::Var x, const ForwardMode& mode) {
    ModelParams& p = *bound.source;
    const ModelConfig& cfg = p.config;
    ad::Var scale = bound[prefix + ".bn.scale"];
    ad::Var shift = bound[prefix + ".bn.shift"];
    auto& rm = p.running_mean[static_cast<std::size_t>(site)];
    auto& rv = p.running_var[static_cast<std::size_t>(site)];
    if (!mode.training) return ad::batchnorm_eval(x, scale, shift, rm, rv, cfg.bn_eps);
    Eigen::RowVectorXd mu, var;
    ad::Var y = ad::batchnorm_train(x, scale, shift, cfg.bn_eps, &mu, &var);
    if (mode.update_running_stats) {
        const double m = cfg.bn_momentum;
        const double n = static_cast<double>(x.rows());
        // unbiased variance feeds the running buffer, as is conventional
        Eigen::RowVectorXd var_u = n > 1.5 ? (var * (n / (n - 1.0))).eval() : var;
        rm = (1.0 - m) * rm + m * mu;
        rv = (1.0 - m) * rv + m * var_u;
    }
    return y;
}

}  // namespace detail

// One round of message passing: relu(batchnorm(adj * X * W)).
inline ad::Var gcn_layer(const BoundParams& bound, int layer, ad::Var x,
                         const NormalizedAdjacency& adj, const ForwardMode& mode) {
    const std::string prefix = "gcn" + std::to_string(layer);
    ad::Var z = ad::matmul(ad::spmm(adj.values, x), bound[prefix + ".weight"]);
    if (bound.source->config.use_batchnorm)
        z = detail::apply_batchnorm(bound, prefix, layer, z, mode);
    return ad::relu(z, mode.relu_margin);
}

// Sum pooling over each graph's node rows.
inline ad::Var readout_sum(ad::Var node_embeddings, const GraphBatch& batch) {
    return ad::segment_sum(node_embeddings, batch.graph_index, batch.n_graphs);
}

inline ad::Var mlp_head(const BoundParams& bound, ad::Var pooled, const ForwardMode& mode) {
    const ModelConfig& cfg = bound.source->config;
    ad::Var h = pooled;
    for (int l = 0; l < cfg.mlp_layers; ++l) {
        const std::string prefix = "mlp" + std::to_string(l);
        h = ad::matmul(h, bound[prefix + ".weight"]);
        if (cfg.use_batchnorm)
            h = detail::apply_batchnorm(bound, prefix, cfg.gcn_layers + l, h, mode);
        h = ad::relu(h, mode.relu_margin);
    }
    return h;
}

inline ad::Var classify_logits(const BoundParams& bound, ad::Var graph_embeddings) {
    return ad::matmul(graph_embeddings, bound["classifier.weight"]);
}

// Row-stochastic class probabilities.
inline ad::Var classify(const BoundParams& bound, ad::Var graph_embeddings) {
    return ad::exp_elem(ad::log_softmax_rows(classify_logits(bound, graph_embeddings)));
}

// Two-layer projection, no bias and no normalization.
inline ad::Var project(const BoundParams& bound, ad::Var graph_embeddings,
                       double* relu_margin = nullptr) {
    return ad::matmul(ad::relu(ad::matmul(graph_embeddings, bound["proj.w1"]), relu_margin),
                      bound["proj.w2"]);
}

struct ForwardResult {
    ad::Var node_embeddings;   // N x hidden
    ad::Var graph_embeddings;  // n_g x hidden
    ad::Var logits;            // n_g x n_classes
    ad::Var projections;       // n_g x projection_dim
};

inline ForwardResult forward(const BoundParams& bound, const GraphBatch& batch,
                             const NormalizedAdjacency& adj, const ForwardMode& mode,
                             ad::Tape& tape) {
    const ModelConfig& cfg = bound.source->config;
    if (batch.node_features.cols() != cfg.input_dim)
        throw DataError("forward: feature dimension does not match the model");
    ForwardResult r;
    ad::Var x = tape.constant(batch.node_features);
    for (int l = 0; l < cfg.gcn_layers; ++l) x = gcn_layer(bound, l, x, adj, mode);
    r.node_embeddings = x;
    r.graph_embeddings = mlp_head(bound, readout_sum(x, batch), mode);
    r.logits = classify_logits(bound, r.graph_embeddings);
    r.projections = project(bound, r.graph_embeddings, mode.relu_margin);
    return r;
}

// d(loss)/d(tensor) for every trainable tensor, in tensor order. The builder
// gets a fresh tape with the parameters already bound.
using LossBuilder = std::function<ad::Var(ad::Tape&, const BoundParams&)>;

inline std::vector<Matrix> gradients(ModelParams& params, const LossBuilder& build) {
    ad::Tape tape;
    BoundParams bound = bind(tape, params);
    ad::Var loss = build(tape, bound);
    tape.backward(loss);
    std::vector<Matrix> out;
    out.reserve(bound.tensors.size());
    for (const ad::Var& v : bound.tensors) out.push_back(v.grad());
    return out;
}

// Binary checkpoint: magic, model fingerprint, then named tensors
// (trainables first, then running buffers) as little-endian doubles.
namespace detail {

inline void write_u64(std::ofstream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::ifstream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw DataError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline void write_named(std::ofstream& out, const std::string& name, const Matrix& m) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (long j = 0; j < m.cols(); ++j)
        for (long i = 0; i < m.rows(); ++i) {
            double d = m(i, j);
            std::uint64_t bits;
            std::memcpy(&bits, &d, 8);
            write_u64(out, bits);
        }
}

inline std::pair<std::string, Matrix> read_named(std::ifstream& in) {
    std::uint64_t len = read_u64(in);
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    std::uint64_t rows = read_u64(in), cols = read_u64(in);
    Matrix m(static_cast<long>(rows), static_cast<long>(cols));
    for (long j = 0; j < m.cols(); ++j)
        for (long i = 0; i < m.rows(); ++i) {
            std::uint64_t bits = read_u64(in);
            double d;
            std::memcpy(&d, &bits, 8);
            m(i, j) = d;
        }
    if (!in) throw DataError("checkpoint: truncated tensor " + name);
    return {name, std::move(m)};
}

constexpr char kCheckpointMagic[] = "SSCDLCKPT1\n";

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic) - 1);
    detail::write_u64(out, model_fingerprint(params.config));
    detail::write_u64(out, params.tensors.size() + 2 * params.running_mean.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
        detail::write_named(out, params.names[i], params.tensors[i]);
    for (std::size_t i = 0; i < params.running_mean.size(); ++i) {
        detail::write_named(out, "bn" + std::to_string(i) + ".running_mean",
                            params.running_mean[i]);
        detail::write_named(out, "bn" + std::to_string(i) + ".running_var",
                            params.running_var[i]);
    }
}

inline ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint " + path.string());
    char magic[sizeof(detail::kCheckpointMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
        throw DataError("checkpoint: bad magic in " + path.string());
    std::uint64_t fp = detail::read_u64(in);
    if (fp != model_fingerprint(cfg))
        throw ConfigError("checkpoint: model fingerprint mismatch (stored " + hex64(fp) +
                          ", expected " + hex64(model_fingerprint(cfg)) + ")");
    ModelParams p = init_params(cfg, 0);
    std::uint64_t count = detail::read_u64(in);
    std::size_t expected = p.tensors.size() + 2 * p.running_mean.size();
    if (count != expected) throw DataError("checkpoint: tensor count mismatch");
    for (std::uint64_t k = 0; k < count; ++k) {
        auto [name, m] = detail::read_named(in);
        bool placed = false;
        for (std::size_t i = 0; i < p.names.size(); ++i) {
            if (p.names[i] == name) {
                if (m.rows() != p.tensors[i].rows() || m.cols() != p.tensors[i].cols())
                    throw DataError("checkpoint: shape mismatch for " + name);
                p.tensors[i] = std::move(m);
                placed = true;
                break;
            }
        }
        if (!placed) {
            for (std::size_t i = 0; i < p.running_mean.size(); ++i) {
                if (name == "bn" + std::to_string(i) + ".running_mean") {
                    if (m.rows() != 1 || m.cols() != p.running_mean[i].cols())
                        throw DataError("checkpoint: shape mismatch for " + name);
                    p.running_mean[i] = m.row(0);
                    placed = true;
                } else if (name == "bn" + std::to_string(i) + ".running_var") {
                    if (m.rows() != 1 || m.cols() != p.running_var[i].cols())
                        throw DataError("checkpoint: shape mismatch for " + name);
                    p.running_var[i] = m.row(0);
                    placed = true;
                }
            }
        }
        if (!placed) throw DataError("checkpoint: unknown tensor " + name);
    }
    return p;
}

}  // namespace sscdl
