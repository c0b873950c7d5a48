#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lwaft/error.hpp"
#include "lwaft/param_store.hpp"
#include "lwaft/rng.hpp"
#include "lwaft/vocab.hpp"

namespace lwaft {

enum class ModelKind : std::uint8_t { seq_transducer, mlp_smoke };

inline std::string to_string(ModelKind kind) {
    return kind == ModelKind::seq_transducer ? "seq_transducer" : "mlp_smoke";
}

inline ModelKind parse_model_kind(const std::string& text) {
    if (text == "seq_transducer") {
        return ModelKind::seq_transducer;
    }
    if (text == "mlp_smoke") {
        return ModelKind::mlp_smoke;
    }
    throw ValidationError("model.kind: unknown kind '" + text + "'");
}

/// Architecture description. For seq_transducer the model is a pre-norm causal
/// transformer over the character vocabulary. For mlp_smoke, model_dim is the
/// hidden width, num_layers the number of hidden layers, and input_dim /
/// output_dim the feature and class counts.
struct ModelSpec {
    ModelKind kind = ModelKind::seq_transducer;
    int vocab_size = vocab::size;
    int model_dim = 32;
    int num_layers = 2;
    int num_heads = 4;
    int context_len = 96;
    int ffn_mult = 4;
    std::uint64_t seed = 0;
    int input_dim = 8;
    int output_dim = 2;

    static ModelSpec mlp_smoke(int in, int hidden, int out, std::uint64_t seed = 0) {
        ModelSpec s;
        s.kind = ModelKind::mlp_smoke;
        s.input_dim = in;
        s.model_dim = hidden;
        s.output_dim = out;
        s.num_layers = 1;
        s.seed = seed;
        return s;
    }

    void validate() const {
        require(model_dim >= 1, "model.model_dim must be >= 1");
        require(num_layers >= 1, "model.num_layers must be >= 1");
        if (kind == ModelKind::mlp_smoke) {
            require(input_dim >= 1, "model.input_dim must be >= 1");
            require(output_dim >= 2, "model.output_dim must be >= 2");
            return;
        }
        require(num_heads >= 1, "model.num_heads must be >= 1");
        require(model_dim % num_heads == 0, "model.model_dim must be divisible by model.num_heads");
        require(context_len >= 2, "model.context_len must be >= 2");
        require(vocab_size >= 4, "model.vocab_size must be >= 4");
        require(ffn_mult >= 1, "model.ffn_mult must be >= 1");
    }

    [[nodiscard]] int head_dim() const { return model_dim / num_heads; }
    [[nodiscard]] int ffn_dim() const { return model_dim * ffn_mult; }
};

/// rows x cols; vectors have rows == 1.
struct LayerShape {
    std::string name;
    std::size_t rows = 1;
    std::size_t cols = 1;
    [[nodiscard]] bool is_matrix() const noexcept { return rows > 1; }
    [[nodiscard]] std::size_t count() const noexcept { return rows * cols; }
};

inline std::vector<LayerShape> layer_shapes(const ModelSpec& spec) {
    spec.validate();
    std::vector<LayerShape> out;
    const auto d = static_cast<std::size_t>(spec.model_dim);
    if (spec.kind == ModelKind::mlp_smoke) {
        auto in = static_cast<std::size_t>(spec.input_dim);
        for (int l = 0; l < spec.num_layers; ++l) {
            const auto p = "mlp." + std::to_string(l);
            out.push_back({p + ".w", d, in});
            out.push_back({p + ".b", 1, d});
            in = d;
        }
        out.push_back({"head.w", static_cast<std::size_t>(spec.output_dim), d});
        out.push_back({"head.b", 1, static_cast<std::size_t>(spec.output_dim)});
        return out;
    }
    const auto v = static_cast<std::size_t>(spec.vocab_size);
    const auto f = static_cast<std::size_t>(spec.ffn_dim());
    out.push_back({"embed.tok", v, d});
    out.push_back({"embed.pos", static_cast<std::size_t>(spec.context_len), d});
    for (int l = 0; l < spec.num_layers; ++l) {
        const auto a = "attn." + std::to_string(l);
        const auto m = "mlp." + std::to_string(l);
        out.push_back({a + ".ln.g", 1, d});
        out.push_back({a + ".ln.b", 1, d});
        out.push_back({a + ".qkv.w", 3 * d, d});
        out.push_back({a + ".qkv.b", 1, 3 * d});
        out.push_back({a + ".proj.w", d, d});
        out.push_back({a + ".proj.b", 1, d});
        out.push_back({m + ".ln.g", 1, d});
        out.push_back({m + ".ln.b", 1, d});
        out.push_back({m + ".w1", f, d});
        out.push_back({m + ".b1", 1, f});
        out.push_back({m + ".w2", d, f});
        out.push_back({m + ".b2", 1, d});
    }
    out.push_back({"final.ln.g", 1, d});
    out.push_back({"final.ln.b", 1, d});
    out.push_back({"head.w", v, d});
    out.push_back({"head.b", 1, v});
    return out;
}

/// Deterministic initialization from spec.seed.
inline ParamStore build_model(const ModelSpec& spec) {
    const auto shapes = layer_shapes(spec);
    ParamStore params;
    const double residual_scale = 1.0 / std::sqrt(2.0 * spec.num_layers);
    for (const auto& shape : shapes) {
        Rng rng(derive_seed(spec.seed, shape.name));
        std::vector<double> values(shape.count(), 0.0);
        const auto& n = shape.name;
        const bool gain = n.ends_with(".ln.g");
        if (gain) {
            std::fill(values.begin(), values.end(), 1.0);
        } else if (n.starts_with("embed.")) {
            for (auto& x : values) {
                x = rng.normal(0.0, 0.1);
            }
        } else if (shape.is_matrix() || n.ends_with(".w")) {
            double stddev = 1.0 / std::sqrt(static_cast<double>(shape.cols));
            if (n.ends_with(".proj.w") || n.ends_with(".w2")) {
                stddev *= residual_scale;
            }
            for (auto& x : values) {
                x = rng.normal(0.0, stddev);
            }
        }
        params.add_layer(shape.name, std::move(values));
    }
    return params;
}

/// A token sequence; target[t] != 0 marks tokens[t] as a prediction target
/// (predicted from position t - 1). target[0] must be 0.
struct TokenSequence {
    std::vector<int> tokens;
    std::vector<std::uint8_t> target;
};

struct DenseExample {
    std::vector<double> features;
    int label = 0;
};

/// Token sequences for seq_transducer, dense examples for mlp_smoke.
struct Batch {
    std::vector<TokenSequence> sequences;
    std::vector<DenseExample> dense;

    [[nodiscard]] std::size_t size() const noexcept { return sequences.size() + dense.size(); }
    [[nodiscard]] bool empty() const noexcept { return size() == 0; }

    [[nodiscard]] Batch select(std::span<const std::size_t> indices) const {
        Batch out;
        for (auto i : indices) {
            if (!sequences.empty()) {
                out.sequences.push_back(sequences.at(i));
            } else {
                out.dense.push_back(dense.at(i));
            }
        }
        return out;
    }
};

namespace detail {

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    double* row(std::size_t i) { return v.data() + i * cols; }
    [[nodiscard]] const double* row(std::size_t i) const { return v.data() + i * cols; }
    double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) {
        s0 += a[i] * b[i];
    }
    return (s0 + s1) + (s2 + s3);
}

inline void axpy(double* y, const double* x, double a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += a * x[i];
    }
}

// y = x W^T + b with W stored out x in.
inline void linear_row(const double* x, std::span<const double> w, std::span<const double> b, std::size_t in,
                       double* y) {
    const auto out = b.size();
    for (std::size_t o = 0; o < out; ++o) {
        y[o] = b[o] + dot(x, w.data() + o * in, in);
    }
}

inline void linear_fwd(const Mat& x, std::span<const double> w, std::span<const double> b, Mat& y) {
    y = Mat(x.rows, b.size());
    for (std::size_t t = 0; t < x.rows; ++t) {
        linear_row(x.row(t), w, b, x.cols, y.row(t));
    }
}

// Accumulates dW, db; writes dx (overwrite) when non-null.
inline void linear_bwd(const Mat& x, std::span<const double> w, const Mat& dy, Mat* dx, std::span<double> dw,
                       std::span<double> db) {
    const auto in = x.cols;
    if (dx != nullptr) {
        *dx = Mat(x.rows, in);
    }
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* g = dy.row(t);
        for (std::size_t o = 0; o < dy.cols; ++o) {
            if (g[o] == 0.0) {
                continue;
            }
            db[o] += g[o];
            axpy(dw.data() + o * in, x.row(t), g[o], in);
            if (dx != nullptr) {
                axpy(dx->row(t), w.data() + o * in, g[o], in);
            }
        }
    }
}

inline constexpr double ln_eps = 1e-5;

struct LnCache {
    std::vector<double> rstd;
    Mat xhat;
};

inline void layernorm_row(const double* x, std::span<const double> g, std::span<const double> b, std::size_t n,
                          double* y, double* xhat, double& rstd_out) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean += x[i];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + ln_eps);
    for (std::size_t i = 0; i < n; ++i) {
        const double xh = (x[i] - mean) * rstd;
        if (xhat != nullptr) {
            xhat[i] = xh;
        }
        y[i] = g[i] * xh + b[i];
    }
    rstd_out = rstd;
}

inline void layernorm_fwd(const Mat& x, std::span<const double> g, std::span<const double> b, Mat& y, LnCache& c) {
    y = Mat(x.rows, x.cols);
    c.xhat = Mat(x.rows, x.cols);
    c.rstd.assign(x.rows, 0.0);
    for (std::size_t t = 0; t < x.rows; ++t) {
        layernorm_row(x.row(t), g, b, x.cols, y.row(t), c.xhat.row(t), c.rstd[t]);
    }
}

// Adds the input gradient into dx.
inline void layernorm_bwd(const Mat& dy, std::span<const double> g, const LnCache& c, Mat& dx, std::span<double> dg,
                          std::span<double> db) {
    const auto n = dy.cols;
    std::vector<double> dxhat(n);
    for (std::size_t t = 0; t < dy.rows; ++t) {
        const double* gy = dy.row(t);
        const double* xh = c.xhat.row(t);
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dg[i] += gy[i] * xh[i];
            db[i] += gy[i];
            dxhat[i] = gy[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= static_cast<double>(n);
        mean_dxhat_xhat /= static_cast<double>(n);
        double* out = dx.row(t);
        for (std::size_t i = 0; i < n; ++i) {
            out[i] += c.rstd[t] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

inline constexpr double gelu_k = 0.7978845608028654; // sqrt(2/pi)

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(gelu_k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
    const double th = std::tanh(gelu_k * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * gelu_k * (1.0 + 3.0 * 0.044715 * x * x);
}

/// Softmax in place; returns log-sum-exp.
inline double softmax_inplace(double* z, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        mx = std::max(mx, z[i]);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        z[i] = std::exp(z[i] - mx);
        sum += z[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        z[i] /= sum;
    }
    return mx + std::log(sum);
}

struct BlockIndex {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct TransformerIndex {
    std::size_t tok, pos;
    std::vector<BlockIndex> blocks;
    std::size_t lnf_g, lnf_b, head_w, head_b;
};

template <class Tag>
std::size_t layer_index(const LayerStore<Tag>& store, const std::string& name) {
    auto i = store.find(name);
    require(i.has_value(), "parameter store is missing layer '" + name + "'");
    return *i;
}

template <class Tag>
TransformerIndex index_transformer(const LayerStore<Tag>& s, const ModelSpec& spec) {
    TransformerIndex ix{};
    ix.tok = layer_index(s, "embed.tok");
    ix.pos = layer_index(s, "embed.pos");
    for (int l = 0; l < spec.num_layers; ++l) {
        const auto a = "attn." + std::to_string(l);
        const auto m = "mlp." + std::to_string(l);
        ix.blocks.push_back(BlockIndex{
            layer_index(s, a + ".ln.g"), layer_index(s, a + ".ln.b"), layer_index(s, a + ".qkv.w"),
            layer_index(s, a + ".qkv.b"), layer_index(s, a + ".proj.w"), layer_index(s, a + ".proj.b"),
            layer_index(s, m + ".ln.g"), layer_index(s, m + ".ln.b"), layer_index(s, m + ".w1"),
            layer_index(s, m + ".b1"), layer_index(s, m + ".w2"), layer_index(s, m + ".b2")});
    }
    ix.lnf_g = layer_index(s, "final.ln.g");
    ix.lnf_b = layer_index(s, "final.ln.b");
    ix.head_w = layer_index(s, "head.w");
    ix.head_b = layer_index(s, "head.b");
    return ix;
}

struct BlockCache {
    LnCache ln1;
    Mat a;
    Mat qkv;
    std::vector<double> probs; // heads x T x T, causal
    Mat att;
    LnCache ln2;
    Mat c;
    Mat h;
    Mat g;
};

struct SequenceCache {
    std::vector<BlockCache> blocks;
    LnCache lnf;
    Mat f;
    Mat probs; // T x V softmax of logits
};

struct DenseCache {
    std::vector<std::vector<double>> activations; // input, then each hidden layer
    std::vector<double> probs;
};

inline void causal_attention_fwd(const Mat& qkv, std::size_t heads, Mat& att, std::vector<double>& probs) {
    const auto T = qkv.rows;
    const auto D = qkv.cols / 3;
    const auto dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    att = Mat(T, D);
    probs.assign(heads * T * T, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
            const double* q = qkv.row(t) + h * dh;
            double* p = probs.data() + (h * T + t) * T;
            for (std::size_t u = 0; u <= t; ++u) {
                p[u] = dot(q, qkv.row(u) + D + h * dh, dh) * scale;
            }
            softmax_inplace(p, t + 1);
            double* o = att.row(t) + h * dh;
            for (std::size_t u = 0; u <= t; ++u) {
                axpy(o, qkv.row(u) + 2 * D + h * dh, p[u], dh);
            }
        }
    }
}

inline void causal_attention_bwd(const Mat& qkv, std::size_t heads, const std::vector<double>& probs, const Mat& datt,
                                 Mat& dqkv) {
    const auto T = qkv.rows;
    const auto D = qkv.cols / 3;
    const auto dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    dqkv = Mat(T, 3 * D);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
            const double* p = probs.data() + (h * T + t) * T;
            const double* dout = datt.row(t) + h * dh;
            double weighted = 0.0;
            for (std::size_t u = 0; u <= t; ++u) {
                dp[u] = dot(dout, qkv.row(u) + 2 * D + h * dh, dh);
                axpy(dqkv.row(u) + 2 * D + h * dh, dout, p[u], dh);
                weighted += p[u] * dp[u];
            }
            const double* q = qkv.row(t) + h * dh;
            double* dq = dqkv.row(t) + h * dh;
            for (std::size_t u = 0; u <= t; ++u) {
                const double ds = p[u] * (dp[u] - weighted) * scale;
                if (ds == 0.0) {
                    continue;
                }
                axpy(dq, qkv.row(u) + D + h * dh, ds, dh);
                axpy(dqkv.row(u) + D + h * dh, q, ds, dh);
            }
        }
    }
}

template <class Store>
std::span<const double> cv(const Store& s, std::size_t i) {
    return s.values(i);
}

/// Forward pass for one sequence; returns summed target cross-entropy.
inline double transformer_forward(const ParamStore& P, const TransformerIndex& ix, const ModelSpec& spec,
                                  const TokenSequence& seq, SequenceCache& cache) {
    const auto T = seq.tokens.size();
    const auto D = static_cast<std::size_t>(spec.model_dim);
    const auto V = static_cast<std::size_t>(spec.vocab_size);
    const auto heads = static_cast<std::size_t>(spec.num_heads);
    Mat x(T, D);
    const auto tok = cv(P, ix.tok);
    const auto pos = cv(P, ix.pos);
    for (std::size_t t = 0; t < T; ++t) {
        const auto id = static_cast<std::size_t>(seq.tokens[t]);
        for (std::size_t i = 0; i < D; ++i) {
            x(t, i) = tok[id * D + i] + pos[t * D + i];
        }
    }
    cache.blocks.assign(ix.blocks.size(), BlockCache{});
    for (std::size_t l = 0; l < ix.blocks.size(); ++l) {
        const auto& b = ix.blocks[l];
        auto& c = cache.blocks[l];
        layernorm_fwd(x, cv(P, b.ln1_g), cv(P, b.ln1_b), c.a, c.ln1);
        linear_fwd(c.a, cv(P, b.qkv_w), cv(P, b.qkv_b), c.qkv);
        causal_attention_fwd(c.qkv, heads, c.att, c.probs);
        Mat proj;
        linear_fwd(c.att, cv(P, b.proj_w), cv(P, b.proj_b), proj);
        for (std::size_t k = 0; k < x.v.size(); ++k) {
            x.v[k] += proj.v[k];
        }
        layernorm_fwd(x, cv(P, b.ln2_g), cv(P, b.ln2_b), c.c, c.ln2);
        linear_fwd(c.c, cv(P, b.w1), cv(P, b.b1), c.h);
        c.g = Mat(c.h.rows, c.h.cols);
        for (std::size_t k = 0; k < c.h.v.size(); ++k) {
            c.g.v[k] = gelu(c.h.v[k]);
        }
        Mat m;
        linear_fwd(c.g, cv(P, b.w2), cv(P, b.b2), m);
        for (std::size_t k = 0; k < x.v.size(); ++k) {
            x.v[k] += m.v[k];
        }
    }
    layernorm_fwd(x, cv(P, ix.lnf_g), cv(P, ix.lnf_b), cache.f, cache.lnf);
    linear_fwd(cache.f, cv(P, ix.head_w), cv(P, ix.head_b), cache.probs);
    double loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        const bool is_target = t + 1 < T && seq.target[t + 1] != 0;
        const double logit = is_target ? cache.probs(t, static_cast<std::size_t>(seq.tokens[t + 1])) : 0.0;
        const double lse = softmax_inplace(cache.probs.row(t), V);
        if (is_target) {
            loss += lse - logit;
        }
    }
    return loss;
}

inline void transformer_backward(const ParamStore& P, const TransformerIndex& ix, const ModelSpec& spec,
                                 const TokenSequence& seq, const SequenceCache& cache, double inv_n, GradStore& G) {
    const auto T = seq.tokens.size();
    const auto D = static_cast<std::size_t>(spec.model_dim);
    const auto V = static_cast<std::size_t>(spec.vocab_size);
    const auto heads = static_cast<std::size_t>(spec.num_heads);
    auto gv = [&G](std::size_t i) { return G.mutable_values(i); };

    Mat dlogits(T, V);
    for (std::size_t t = 0; t + 1 < T; ++t) {
        if (seq.target[t + 1] == 0) {
            continue;
        }
        const double* p = cache.probs.row(t);
        double* d = dlogits.row(t);
        for (std::size_t k = 0; k < V; ++k) {
            d[k] = p[k] * inv_n;
        }
        d[static_cast<std::size_t>(seq.tokens[t + 1])] -= inv_n;
    }
    Mat df;
    linear_bwd(cache.f, cv(P, ix.head_w), dlogits, &df, gv(ix.head_w), gv(ix.head_b));
    Mat dx(T, D);
    layernorm_bwd(df, cv(P, ix.lnf_g), cache.lnf, dx, gv(ix.lnf_g), gv(ix.lnf_b));

    for (std::size_t l = ix.blocks.size(); l-- > 0;) {
        const auto& b = ix.blocks[l];
        const auto& c = cache.blocks[l];
        // MLP branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid))
        Mat dg;
        linear_bwd(c.g, cv(P, b.w2), dx, &dg, gv(b.w2), gv(b.b2));
        for (std::size_t k = 0; k < dg.v.size(); ++k) {
            dg.v[k] *= gelu_grad(c.h.v[k]);
        }
        Mat dc;
        linear_bwd(c.c, cv(P, b.w1), dg, &dc, gv(b.w1), gv(b.b1));
        layernorm_bwd(dc, cv(P, b.ln2_g), c.ln2, dx, gv(b.ln2_g), gv(b.ln2_b));
        // attention branch: x_mid = x_in + Wp attn(Wqkv ln1(x_in))
        Mat datt;
        linear_bwd(c.att, cv(P, b.proj_w), dx, &datt, gv(b.proj_w), gv(b.proj_b));
        Mat dqkv;
        causal_attention_bwd(c.qkv, heads, c.probs, datt, dqkv);
        Mat da;
        linear_bwd(c.a, cv(P, b.qkv_w), dqkv, &da, gv(b.qkv_w), gv(b.qkv_b));
        layernorm_bwd(da, cv(P, b.ln1_g), c.ln1, dx, gv(b.ln1_g), gv(b.ln1_b));
    }
    auto dtok = gv(ix.tok);
    auto dpos = gv(ix.pos);
    for (std::size_t t = 0; t < T; ++t) {
        const auto id = static_cast<std::size_t>(seq.tokens[t]);
        axpy(dtok.data() + id * D, dx.row(t), 1.0, D);
        axpy(dpos.data() + t * D, dx.row(t), 1.0, D);
    }
}

inline double dense_forward(const ParamStore& P, const ModelSpec& spec, const DenseExample& ex, DenseCache& cache) {
    cache.activations.clear();
    cache.activations.push_back(ex.features);
    for (int l = 0; l < spec.num_layers; ++l) {
        const auto p = "mlp." + std::to_string(l);
        const auto w = P.values(p + ".w");
        const auto b = P.values(p + ".b");
        const auto& in = cache.activations.back();
        std::vector<double> out(b.size());
        linear_row(in.data(), w, b, in.size(), out.data());
        for (auto& v : out) {
            v = std::tanh(v);
        }
        cache.activations.push_back(std::move(out));
    }
    const auto w = P.values("head.w");
    const auto b = P.values("head.b");
    const auto& hidden = cache.activations.back();
    cache.probs.assign(b.size(), 0.0);
    linear_row(hidden.data(), w, b, hidden.size(), cache.probs.data());
    const double logit = cache.probs[static_cast<std::size_t>(ex.label)];
    return softmax_inplace(cache.probs.data(), cache.probs.size()) - logit;
}

inline void dense_backward(const ParamStore& P, const ModelSpec& spec, const DenseExample& ex,
                           const DenseCache& cache, double inv_n, GradStore& G) {
    std::vector<double> dz = cache.probs;
    dz[static_cast<std::size_t>(ex.label)] -= 1.0;
    for (auto& v : dz) {
        v *= inv_n;
    }
    auto backprop = [&](const std::string& prefix, const std::vector<double>& input, const std::vector<double>& dout,
                        std::vector<double>* din) {
        const auto w = P.values(prefix + ".w");
        auto dw = G.mutable_values(*G.find(prefix + ".w"));
        auto db = G.mutable_values(*G.find(prefix + ".b"));
        const auto in = input.size();
        if (din != nullptr) {
            din->assign(in, 0.0);
        }
        for (std::size_t o = 0; o < dout.size(); ++o) {
            db[o] += dout[o];
            axpy(dw.data() + o * in, input.data(), dout[o], in);
            if (din != nullptr) {
                axpy(din->data(), w.data() + o * in, dout[o], in);
            }
        }
    };
    std::vector<double> dh;
    const auto L = static_cast<std::size_t>(spec.num_layers);
    backprop("head", cache.activations[L], dz, &dh);
    for (std::size_t l = L; l-- > 0;) {
        const auto& act = cache.activations[l + 1];
        for (std::size_t k = 0; k < dh.size(); ++k) {
            dh[k] *= 1.0 - act[k] * act[k];
        }
        std::vector<double> din;
        backprop("mlp." + std::to_string(l), cache.activations[l], dh, l > 0 ? &din : nullptr);
        dh = std::move(din);
    }
}

inline std::size_t validate_batch(const ModelSpec& spec, const Batch& batch) {
    require(!batch.empty(), "empty batch");
    std::size_t targets = 0;
    if (spec.kind == ModelKind::mlp_smoke) {
        require(batch.sequences.empty(), "mlp_smoke expects dense examples");
        for (const auto& ex : batch.dense) {
            require(ex.features.size() == static_cast<std::size_t>(spec.input_dim),
                    "dense example has " + std::to_string(ex.features.size()) + " features, expected " +
                        std::to_string(spec.input_dim));
            require(ex.label >= 0 && ex.label < spec.output_dim, "label out of range");
        }
        return batch.dense.size();
    }
    require(batch.dense.empty(), "seq_transducer expects token sequences");
    for (const auto& seq : batch.sequences) {
        require(seq.tokens.size() == seq.target.size(), "token/target length mismatch");
        require(!seq.tokens.empty(), "empty sequence");
        require(seq.tokens.size() <= static_cast<std::size_t>(spec.context_len),
                "sequence length " + std::to_string(seq.tokens.size()) + " exceeds context_len " +
                    std::to_string(spec.context_len));
        require(seq.target[0] == 0, "first token cannot be a target");
        for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
            const int id = seq.tokens[t];
            require(id >= 0 && id < spec.vocab_size, "token id " + std::to_string(id) + " out of range");
            targets += seq.target[t] != 0 ? 1 : 0;
        }
    }
    require(targets > 0, "empty target: every position is masked as padding");
    return targets;
}

} // namespace detail

struct ForwardResult;

/// Activation record from forward_loss, sufficient for an exact backward pass.
/// Holds a pointer to the parameters it was computed from; the pointee must
/// outlive the cache and must not be mutated before backward().
class ForwardCache {
public:
    [[nodiscard]] double loss() const noexcept { return loss_; }
    [[nodiscard]] std::size_t target_count() const noexcept { return targets_; }

private:
    friend ForwardResult forward_loss(const ParamStore&, const ModelSpec&, const Batch&);
    friend GradStore backward(const ForwardCache&);

    const ParamStore* params_ = nullptr;
    std::uint64_t generation_ = 0;
    ModelSpec spec_;
    Batch batch_;
    std::vector<detail::SequenceCache> seq_;
    std::vector<detail::DenseCache> dense_;
    std::size_t targets_ = 0;
    double loss_ = 0.0;
};

struct ForwardResult {
    double loss = 0.0;
    ForwardCache cache;
};

/// Mean token-level cross-entropy over target positions (or over examples
/// for mlp_smoke).
inline ForwardResult forward_loss(const ParamStore& params, const ModelSpec& spec, const Batch& batch) {
    spec.validate();
    const auto targets = detail::validate_batch(spec, batch);
    ForwardResult r;
    auto& c = r.cache;
    c.params_ = &params;
    c.generation_ = params.generation();
    c.spec_ = spec;
    c.batch_ = batch;
    c.targets_ = targets;
    double total = 0.0;
    if (spec.kind == ModelKind::mlp_smoke) {
        c.dense_.resize(batch.dense.size());
        for (std::size_t i = 0; i < batch.dense.size(); ++i) {
            total += detail::dense_forward(params, spec, batch.dense[i], c.dense_[i]);
        }
    } else {
        const auto ix = detail::index_transformer(params, spec);
        c.seq_.resize(batch.sequences.size());
        for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
            total += detail::transformer_forward(params, ix, spec, batch.sequences[i], c.seq_[i]);
        }
    }
    r.loss = total / static_cast<double>(targets);
    c.loss_ = r.loss;
    return r;
}

/// Exact reverse-mode gradient of the mean loss.
inline GradStore backward(const ForwardCache& cache) {
    if (cache.params_ == nullptr || cache.params_->generation() != cache.generation_) {
        throw StaleCacheError();
    }
    const auto& P = *cache.params_;
    auto G = GradStore::zeros_like(P);
    const double inv_n = 1.0 / static_cast<double>(cache.targets_);
    if (cache.spec_.kind == ModelKind::mlp_smoke) {
        for (std::size_t i = 0; i < cache.batch_.dense.size(); ++i) {
            detail::dense_backward(P, cache.spec_, cache.batch_.dense[i], cache.dense_[i], inv_n, G);
        }
    } else {
        const auto ix = detail::index_transformer(P, cache.spec_);
        for (std::size_t i = 0; i < cache.batch_.sequences.size(); ++i) {
            detail::transformer_backward(P, ix, cache.spec_, cache.batch_.sequences[i], cache.seq_[i], inv_n, G);
        }
    }
    return G;
}

/// Max relative error between backward() and central finite differences,
/// |a - fd| / max(|a|, |fd|, 1e-12), over `samples` parameters drawn without
/// replacement (all parameters when samples == 0). A difference within the
/// rounding noise of the difference quotient itself (8 ulps of the loss over
/// 2 * fd_step) counts as zero, so coordinates whose true gradient is zero or
/// below what the step can resolve don't report spurious errors.
inline double grad_check(const ParamStore& params, const ModelSpec& spec, const Batch& batch, double fd_step,
                         std::size_t samples = 0, std::uint64_t sample_seed = 0) {
    require(fd_step > 0.0 && std::isfinite(fd_step), "grad_check: fd_step must be > 0");
    auto fwd = forward_loss(params, spec, batch);
    const auto analytic = backward(fwd.cache);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
        for (std::size_t j = 0; j < params.size(l); ++j) {
            coords.emplace_back(l, j);
        }
    }
    if (samples != 0 && samples < coords.size()) {
        Rng rng(sample_seed);
        rng.shuffle(std::span(coords));
        coords.resize(samples);
    }
    ParamStore probe = params;
    double worst = 0.0;
    for (auto [l, j] : coords) {
        const double original = probe.values(l)[j];
        probe.mutable_values(l)[j] = original + fd_step;
        const double up = forward_loss(probe, spec, batch).loss;
        probe.mutable_values(l)[j] = original - fd_step;
        const double down = forward_loss(probe, spec, batch).loss;
        probe.mutable_values(l)[j] = original;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw RuntimeFailure("grad_check: non-finite loss while perturbing '" + params.name(l) + "'[" +
                                 std::to_string(j) + "]");
        }
        const double fd = (up - down) / (2.0 * fd_step);
        const double a = analytic.values(l)[j];
        const double noise =
            8.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(up), std::abs(down)) / (2.0 * fd_step);
        const double diff = std::max(0.0, std::abs(a - fd) - noise);
        const double denom = std::max({std::abs(a), std::abs(fd), 1e-12});
        worst = std::max(worst, diff / denom);
    }
    return worst;
}

/// Incremental (key/value cached) evaluation of a seq_transducer, one token
/// at a time. Produces the same logits as a full forward pass.
class IncrementalDecoder {
public:
    IncrementalDecoder(const ParamStore& params, const ModelSpec& spec)
        : P_(params), spec_(spec), ix_(detail::index_transformer(params, spec)) {
        require(spec.kind == ModelKind::seq_transducer, "decoding requires a seq_transducer model");
        const auto C = static_cast<std::size_t>(spec.context_len);
        const auto D = static_cast<std::size_t>(spec.model_dim);
        keys_.assign(ix_.blocks.size(), detail::Mat(C, D));
        vals_.assign(ix_.blocks.size(), detail::Mat(C, D));
    }

    [[nodiscard]] std::size_t position() const noexcept { return pos_; }

    /// Feed one token; returns logits for the next position.
    std::vector<double> step(int token) {
        require(pos_ < static_cast<std::size_t>(spec_.context_len), "decoder context exhausted");
        require(token >= 0 && token < spec_.vocab_size, "token id out of range");
        const auto D = static_cast<std::size_t>(spec_.model_dim);
        const auto H = static_cast<std::size_t>(spec_.num_heads);
        const auto dh = D / H;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const auto tok = P_.values(ix_.tok);
        const auto pe = P_.values(ix_.pos);
        std::vector<double> x(D), a(D), qkv(3 * D), att(D), tmp(D), c(D);
        std::vector<double> h(static_cast<std::size_t>(spec_.ffn_dim()));
        const auto id = static_cast<std::size_t>(token);
        for (std::size_t i = 0; i < D; ++i) {
            x[i] = tok[id * D + i] + pe[pos_ * D + i];
        }
        double rstd = 0.0;
        std::vector<double> scores(pos_ + 1);
        for (std::size_t l = 0; l < ix_.blocks.size(); ++l) {
            const auto& b = ix_.blocks[l];
            detail::layernorm_row(x.data(), P_.values(b.ln1_g), P_.values(b.ln1_b), D, a.data(), nullptr, rstd);
            detail::linear_row(a.data(), P_.values(b.qkv_w), P_.values(b.qkv_b), D, qkv.data());
            std::copy_n(qkv.data() + D, D, keys_[l].row(pos_));
            std::copy_n(qkv.data() + 2 * D, D, vals_[l].row(pos_));
            std::fill(att.begin(), att.end(), 0.0);
            for (std::size_t hd = 0; hd < H; ++hd) {
                for (std::size_t u = 0; u <= pos_; ++u) {
                    scores[u] = detail::dot(qkv.data() + hd * dh, keys_[l].row(u) + hd * dh, dh) * scale;
                }
                detail::softmax_inplace(scores.data(), pos_ + 1);
                for (std::size_t u = 0; u <= pos_; ++u) {
                    detail::axpy(att.data() + hd * dh, vals_[l].row(u) + hd * dh, scores[u], dh);
                }
            }
            detail::linear_row(att.data(), P_.values(b.proj_w), P_.values(b.proj_b), D, tmp.data());
            for (std::size_t i = 0; i < D; ++i) {
                x[i] += tmp[i];
            }
            detail::layernorm_row(x.data(), P_.values(b.ln2_g), P_.values(b.ln2_b), D, c.data(), nullptr, rstd);
            detail::linear_row(c.data(), P_.values(b.w1), P_.values(b.b1), D, h.data());
            for (auto& v : h) {
                v = detail::gelu(v);
            }
            detail::linear_row(h.data(), P_.values(b.w2), P_.values(b.b2), h.size(), tmp.data());
            for (std::size_t i = 0; i < D; ++i) {
                x[i] += tmp[i];
            }
        }
        detail::layernorm_row(x.data(), P_.values(ix_.lnf_g), P_.values(ix_.lnf_b), D, c.data(), nullptr, rstd);
        std::vector<double> logits(static_cast<std::size_t>(spec_.vocab_size));
        detail::linear_row(c.data(), P_.values(ix_.head_w), P_.values(ix_.head_b), D, logits.data());
        ++pos_;
        return logits;
    }

private:
    const ParamStore& P_;
    ModelSpec spec_;
    detail::TransformerIndex ix_;
    std::vector<detail::Mat> keys_;
    std::vector<detail::Mat> vals_;
    std::size_t pos_ = 0;
};

/// Argmax decoding; ties go to the lowest token id. Stops at the end token,
/// after max_len tokens, or when the context is full.
inline std::vector<int> decode_greedy_tokens(const ParamStore& params, const ModelSpec& spec,
                                             std::span<const int> prompt, std::size_t max_len) {
    require(spec.kind == ModelKind::seq_transducer, "decoding requires a seq_transducer model");
    require(!prompt.empty(), "decode: empty prompt");
    require(prompt.size() < static_cast<std::size_t>(spec.context_len),
            "prompt length " + std::to_string(prompt.size()) + " must be < context_len " +
                std::to_string(spec.context_len));
    std::vector<int> out;
    if (max_len == 0) {
        return out;
    }
    IncrementalDecoder dec(params, spec);
    std::vector<double> logits;
    for (int t : prompt) {
        logits = dec.step(t);
    }
    while (out.size() < max_len) {
        const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (best == vocab::end) {
            break;
        }
        out.push_back(best);
        if (dec.position() >= static_cast<std::size_t>(spec.context_len) || out.size() == max_len) {
            break;
        }
        logits = dec.step(best);
    }
    return out;
}

inline std::string decode_greedy(const ParamStore& params, const ModelSpec& spec, std::span<const int> prompt,
                                 std::size_t max_len) {
    return vocab::decode(decode_greedy_tokens(params, spec, prompt, max_len));
}

} // namespace lwaft
