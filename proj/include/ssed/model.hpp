#pragma once

// Denoising network: adaptive-adjacency graph GRU encoder, cascaded temporal
// then spatial self-attention, and a linear output head.
//
// Internal activations are node-major, [N, B, T, F], so that the adjacency
// mixing and the per-node weights act on contiguous blocks.

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssed/random.hpp"
#include "ssed/series.hpp"
#include "ssed/tensor.hpp"

namespace ssed {

enum class Ablation { full, no_transformer, spatial_attention_only, temporal_attention_only };

inline const char* ablation_name(Ablation a)
{
    switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_transformer: return "no_transformer";
    case Ablation::spatial_attention_only: return "spatial_attention_only";
    case Ablation::temporal_attention_only: return "temporal_attention_only";
    }
    return "?";
}

inline Ablation parse_ablation(const std::string& s)
{
    for (auto a : {Ablation::full, Ablation::no_transformer, Ablation::spatial_attention_only,
                   Ablation::temporal_attention_only})
        if (s == ablation_name(a)) return a;
    throw std::invalid_argument("unknown ablation mode '" + s + "'");
}

struct ModelConfig {
    std::size_t stations = 20;
    std::size_t embed_dim = 32;   // d_N
    std::size_t hidden = 128;     // recurrent state size h
    std::size_t model_dim = 128;  // transformer width
    std::size_t heads = 4;
    std::size_t ffn_dim = 0;      // 0: twice model_dim
    std::size_t layers = 1;
    std::size_t components = kComponents;
    double attn_dropout = 0.1;
    double out_dropout = 0.5;
    bool positional_encoding = false;
    Ablation ablation = Ablation::full;

    bool temporal() const { return ablation == Ablation::full || ablation == Ablation::temporal_attention_only; }
    bool spatial() const { return ablation == Ablation::full || ablation == Ablation::spatial_attention_only; }
    bool transformer() const { return ablation != Ablation::no_transformer; }
    std::size_t ffn() const { return ffn_dim ? ffn_dim : 2 * model_dim; }
    std::size_t key_dim() const { return model_dim / heads; }
    std::size_t head_in() const { return transformer() ? model_dim : hidden; }

    void validate() const
    {
        if (stations == 0 || embed_dim == 0 || hidden == 0 || model_dim == 0 || heads == 0 || components == 0)
            throw std::invalid_argument("ModelConfig: all sizes must be positive");
        if (model_dim % heads != 0)
            throw std::invalid_argument("ModelConfig: model_dim " + std::to_string(model_dim) +
                                        " is not divisible by heads " + std::to_string(heads));
        if (transformer() && layers == 0) throw std::invalid_argument("ModelConfig: layers must be >= 1");
        for (double p : {attn_dropout, out_dropout})
            if (p < 0.0 || p >= 1.0) throw std::invalid_argument("ModelConfig: dropout rates must lie in [0,1)");
    }
};

/// One pre-norm attention block: x + Attn(LN(x)), then x + FFN(LN(x)).
struct AttentionParams {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ModelParams {
    Tensor E;                      // [N, d_N]
    Tensor wz_pool, wr_pool, wc_pool;  // [d_N, C+h, h]
    Tensor bz_pool, br_pool, bc_pool;  // [d_N, h]
    Tensor in_w, in_b;             // [h, D], [D]; only when h != D
    std::vector<AttentionParams> temporal, spatial;
    Tensor final_g, final_b;       // [D]
    Tensor out_w, out_b;           // [D or h, C], [C]

    std::vector<std::pair<std::string, Tensor*>> named()
    {
        std::vector<std::pair<std::string, Tensor*>> out{
            {"E", &E},           {"W_z", &wz_pool},   {"W_r", &wr_pool}, {"W_c", &wc_pool},
            {"b_z", &bz_pool},   {"b_r", &br_pool},   {"b_c", &bc_pool}};
        if (in_w.defined()) {
            out.push_back({"in_w", &in_w});
            out.push_back({"in_b", &in_b});
        }
        auto blocks = [&](std::vector<AttentionParams>& v, const std::string& tag) {
            for (std::size_t l = 0; l < v.size(); ++l) {
                auto p = tag + std::to_string(l) + ".";
                auto& b = v[l];
                for (auto [n, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
                         {"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b}, {"W_q", &b.wq}, {"W_k", &b.wk},
                         {"W_v", &b.wv},     {"W_attn_o", &b.wo}, {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b},
                         {"ffn_w1", &b.w1},  {"ffn_b1", &b.b1},   {"ffn_w2", &b.w2}, {"ffn_b2", &b.b2}})
                    out.push_back({p + n, t});
            }
        };
        blocks(temporal, "temporal");
        blocks(spatial, "spatial");
        if (final_g.defined()) {
            out.push_back({"final_g", &final_g});
            out.push_back({"final_b", &final_b});
        }
        out.push_back({"W_o", &out_w});
        out.push_back({"b_o", &out_b});
        return out;
    }

    std::vector<Tensor> tensors()
    {
        std::vector<Tensor> out;
        for (auto& [n, t] : named()) out.push_back(*t);
        return out;
    }

    std::size_t count()
    {
        std::size_t n = 0;
        for (auto& [name, t] : named()) n += t->size();
        return n;
    }
};

namespace model_detail {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng)
{
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = uniform(rng, -bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor normal_tensor(Shape shape, double sd, Rng& rng)
{
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = normal(rng, 0.0, sd);
    return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor linear_weight(std::size_t in, std::size_t out, Rng& rng)
{
    return uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

inline AttentionParams init_block(const ModelConfig& c, Rng& rng)
{
    const std::size_t D = c.model_dim, F = c.ffn();
    AttentionParams b;
    b.ln1_g = Tensor::full({D}, 1.0, true);
    b.ln1_b = Tensor::zeros({D}, true);
    b.wq = linear_weight(D, D, rng);
    b.wk = linear_weight(D, D, rng);
    b.wv = linear_weight(D, D, rng);
    b.wo = linear_weight(D, D, rng);
    b.ln2_g = Tensor::full({D}, 1.0, true);
    b.ln2_b = Tensor::zeros({D}, true);
    b.w1 = linear_weight(D, F, rng);
    b.b1 = Tensor::zeros({F}, true);
    b.w2 = linear_weight(F, D, rng);
    b.b2 = Tensor::zeros({D}, true);
    return b;
}

}  // namespace model_detail

inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed)
{
    c.validate();
    Rng rng = make_stream(seed, {0x1417});
    const std::size_t N = c.stations, dN = c.embed_dim, H = c.hidden, C = c.components;
    ModelParams p;
    p.E = model_detail::normal_tensor({N, dN}, 1.0 / std::sqrt(static_cast<double>(dN)), rng);
    const double pool = 1.0 / std::sqrt(static_cast<double>(C + H));
    p.wz_pool = model_detail::uniform_tensor({dN, C + H, H}, pool, rng);
    p.wr_pool = model_detail::uniform_tensor({dN, C + H, H}, pool, rng);
    p.wc_pool = model_detail::uniform_tensor({dN, C + H, H}, pool, rng);
    p.bz_pool = Tensor::zeros({dN, H}, true);
    p.br_pool = Tensor::zeros({dN, H}, true);
    p.bc_pool = Tensor::zeros({dN, H}, true);
    if (c.transformer()) {
        if (H != c.model_dim) {
            p.in_w = model_detail::linear_weight(H, c.model_dim, rng);
            p.in_b = Tensor::zeros({c.model_dim}, true);
        }
        for (std::size_t l = 0; l < c.layers; ++l) {
            if (c.temporal()) p.temporal.push_back(model_detail::init_block(c, rng));
            if (c.spatial()) p.spatial.push_back(model_detail::init_block(c, rng));
        }
        p.final_g = Tensor::full({c.model_dim}, 1.0, true);
        p.final_b = Tensor::zeros({c.model_dim}, true);
    }
    p.out_w = model_detail::linear_weight(c.head_in(), C, rng);
    p.out_b = Tensor::zeros({C}, true);
    return p;
}

// ---------------------------------------------------------------------------
// Adjacency and graph recurrence
// ---------------------------------------------------------------------------

/// Pre-softmax edge scores ReLU(E Eᵀ); exactly symmetric.
inline Tensor adjacency_scores(const Tensor& E)
{
    if (E.rank() != 2) throw ShapeError("adjacency_scores: E must be [N, d_N], got " + to_string(E.shape()));
    return relu(gram(E));
}

/// Row-wise softmax of ReLU(E Eᵀ).
inline Tensor compute_adjacency(const Tensor& E)
{
    if (E.rank() != 2) throw ShapeError("compute_adjacency: E must be [N, d_N], got " + to_string(E.shape()));
    return softmax(adjacency_scores(E), 1);
}

/// Per-node GRU weights: update and reset gates fused along the output axis.
struct GruWeights {
    Tensor A;      // [N, N]
    Tensor gates;  // [N, C+h, 2h]
    Tensor gate_bias;  // [N, 2h]
    Tensor cand;   // [N, C+h, h]
    Tensor cand_bias;  // [N, h]
    std::size_t hidden = 0;
};

inline GruWeights gru_weights(const ModelParams& p, const ModelConfig& c)
{
    const std::size_t N = c.stations, dN = c.embed_dim, H = c.hidden, F = c.components + c.hidden;
    if (p.E.shape() != Shape{N, dN}) throw ShapeError("gru_weights: E is " + to_string(p.E.shape()));
    GruWeights w;
    w.hidden = H;
    w.A = compute_adjacency(p.E);
    Tensor zr = concat({p.wz_pool, p.wr_pool}, 2);  // [dN, F, 2H]
    w.gates = reshape(matmul(p.E, reshape(zr, {dN, F * 2 * H})), {N, F, 2 * H});
    w.gate_bias = matmul(p.E, concat({p.bz_pool, p.br_pool}, 1));
    w.cand = reshape(matmul(p.E, reshape(p.wc_pool, {dN, F * H})), {N, F, H});
    w.cand_bias = matmul(p.E, p.bc_pool);
    return w;
}

namespace model_detail {

/// A · X over the node axis of X: [N, B, F].
inline Tensor node_mix(const Tensor& A, const Tensor& x)
{
    const std::size_t N = x.dim(0), B = x.dim(1), F = x.dim(2);
    return reshape(matmul(A, reshape(x, {N, B * F})), {N, B, F});
}

inline void require_finite(const Tensor& t, const char* what)
{
    for (double v : t.data())
        if (!std::isfinite(v)) throw std::runtime_error(std::string("graph_recurrent_step: non-finite ") + what);
}

}  // namespace model_detail

/// One graph GRU step on node-major tensors: x [N, B, C], h [N, B, h] -> [N, B, h].
inline Tensor graph_recurrent_step(const Tensor& x, const Tensor& h, const GruWeights& w)
{
    if (x.rank() != 3 || h.rank() != 3 || x.dim(0) != h.dim(0) || x.dim(1) != h.dim(1) || h.dim(2) != w.hidden)
        throw ShapeError("graph_recurrent_step: x " + to_string(x.shape()) + " vs h " + to_string(h.shape()));
    const std::size_t B = x.dim(1), H = w.hidden;
    using model_detail::node_mix;
    Tensor g = add(bmm(node_mix(w.A, concat({x, h}, 2)), w.gates), expand(w.gate_bias, 1, B));
    g = sigmoid(g);
    model_detail::require_finite(g, "gate (update/reset)");
    Tensor z = slice(g, 2, 0, H);
    Tensor r = slice(g, 2, H, H);
    Tensor c = tanh(add(bmm(node_mix(w.A, concat({x, mul(r, h)}, 2)), w.cand), expand(w.cand_bias, 1, B)));
    model_detail::require_finite(c, "candidate state");
    // z*h + (1-z)*c
    return add(c, mul(z, sub(h, c)));
}

/// Runs the recurrence from h(0) = 0 over x [N, B, T, C]; returns [N, B, T, h].
inline Tensor encode_sequence(const Tensor& x, const GruWeights& w)
{
    if (x.rank() != 4) throw ShapeError("encode_sequence: expected [N,B,T,C], got " + to_string(x.shape()));
    const std::size_t N = x.dim(0), B = x.dim(1), T = x.dim(2), C = x.dim(3), H = w.hidden;
    Tensor h = Tensor::zeros({N, B, H});
    std::vector<Tensor> states;
    states.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        Tensor xt = reshape(slice(x, 2, t, 1), {N, B, C});
        h = graph_recurrent_step(xt, h, w);
        states.push_back(reshape(h, {N, B, 1, H}));
    }
    return concat(states, 2);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head self-attention sublayer on x [S, L, D] (no residual).
inline Tensor self_attention(const Tensor& x, const AttentionParams& b, std::size_t heads, Tensor* weights = nullptr)
{
    const std::size_t S = x.dim(0), L = x.dim(1), D = x.dim(2), dk = D / heads;
    auto split = [&](const Tensor& t) {
        if (heads == 1) return t;
        return reshape(permute(reshape(t, {S, L, heads, dk}), {0, 2, 1, 3}), {S * heads, L, dk});
    };
    Tensor q = split(linear(x, b.wq)), k = split(linear(x, b.wk)), v = split(linear(x, b.wv));
    Tensor o = scaled_dot_product(q, k, v, 0.0, false, nullptr, weights);
    if (heads > 1) o = reshape(permute(reshape(o, {S, heads, L, dk}), {0, 2, 1, 3}), {S, L, D});
    return linear(o, b.wo);
}

/// Pre-norm transformer block on x [S, L, D].
inline Tensor attention_block(const Tensor& x, const AttentionParams& b, std::size_t heads, double dropout_rate,
                              bool train, Rng* rng, Tensor* weights = nullptr)
{
    static Rng unused;
    Rng& r = rng ? *rng : unused;
    if (train && dropout_rate > 0.0 && !rng) throw std::invalid_argument("attention_block: dropout needs an rng");
    Tensor a = self_attention(layer_norm(x, b.ln1_g, b.ln1_b), b, heads, weights);
    Tensor y = add(x, dropout(a, dropout_rate, train, r));
    Tensor f = linear(relu(linear(layer_norm(y, b.ln2_g, b.ln2_b), b.w1, &b.b1)), b.w2, &b.b2);
    return add(y, dropout(f, dropout_rate, train, r));
}

inline Tensor sinusoidal_encoding(std::size_t length, std::size_t dim)
{
    std::vector<double> v(length * dim);
    for (std::size_t t = 0; t < length; ++t)
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            v[t * dim + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
        }
    return Tensor({length, dim}, std::move(v));
}

/// Temporal attention per station over the time axis, then spatial attention
/// per time step over the station axis. H: [N, B, T, h] -> [N, B, T, D].
inline Tensor spatiotemporal_transformer(const Tensor& H, const ModelParams& p, const ModelConfig& c, bool train,
                                         Rng* rng)
{
    const std::size_t N = H.dim(0), B = H.dim(1), T = H.dim(2), D = c.model_dim;
    Tensor x = p.in_w.defined() ? linear(H, p.in_w, &p.in_b) : H;
    if (c.positional_encoding) x = add(x, expand(expand(sinusoidal_encoding(T, D), 0, B), 0, N));
    for (std::size_t l = 0; l < c.layers; ++l) {
        if (c.temporal())
            x = reshape(attention_block(reshape(x, {N * B, T, D}), p.temporal[l], c.heads, c.attn_dropout, train, rng),
                        {N, B, T, D});
        if (c.spatial()) {
            Tensor s = reshape(permute(x, {1, 2, 0, 3}), {B * T, N, D});
            s = attention_block(s, p.spatial[l], c.heads, c.attn_dropout, train, rng);
            x = permute(reshape(s, {B, T, N, D}), {2, 0, 1, 3});
        }
    }
    return layer_norm(x, p.final_g, p.final_b);
}

/// Output dropout then the affine map to the displacement components.
inline Tensor project_output(const Tensor& O, const ModelParams& p, const ModelConfig& c, bool train, Rng* rng)
{
    if (train && c.out_dropout > 0.0 && !rng) throw std::invalid_argument("project_output: dropout needs an rng");
    static Rng unused;
    return linear(dropout(O, c.out_dropout, train, rng ? *rng : unused), p.out_w, &p.out_b);
}

/// Full network on a scaled, gap-filled batch x [B, N, T, C]; returns [B, N, T, C].
inline Tensor forward(const ModelParams& p, const ModelConfig& c, const Tensor& x, bool train = false,
                      Rng* rng = nullptr)
{
    if (x.rank() != 4 || x.dim(1) != c.stations || x.dim(3) != c.components)
        throw ShapeError("forward: expected [B," + std::to_string(c.stations) + ",T," +
                         std::to_string(c.components) + "], got " + to_string(x.shape()));
    auto w = gru_weights(p, c);
    Tensor H = encode_sequence(permute(x, {1, 0, 2, 3}), w);
    Tensor O = c.transformer() ? spatiotemporal_transformer(H, p, c, train, rng) : H;
    return permute(project_output(O, p, c, train, rng), {1, 0, 2, 3});
}

// ---------------------------------------------------------------------------
// Input policy
// ---------------------------------------------------------------------------

/// Per window, station and component: remove the least-squares line through
/// the observed days, fill gaps with zero, divide by `scale`. Stations missing
/// more than half of the window are zeroed entirely.
inline void prepare_window(const SeriesBlock& observed, const GapMask* mask, double scale, double* out)
{
    const std::size_t N = observed.stations, T = observed.days, C = observed.comps;
    for (std::size_t s = 0; s < N; ++s) {
        auto gap = [&](std::size_t t) {
            if (mask && (*mask)(s, t)) return true;
            for (std::size_t c = 0; c < C; ++c)
                if (!std::isfinite(observed(s, t, c))) return true;
            return false;
        };
        std::size_t gaps = 0;
        for (std::size_t t = 0; t < T; ++t) gaps += gap(t);
        const bool drop = 2 * gaps > T;
        for (std::size_t c = 0; c < C; ++c) {
            LineFit f;
            if (!drop) f = fit_line(T, [&](std::size_t t) { return gap(t) ? kGapSentinel : observed(s, t, c); });
            for (std::size_t t = 0; t < T; ++t) {
                double v = 0.0;
                if (!drop && !gap(t)) v = (observed(s, t, c) - f.intercept - f.slope * static_cast<double>(t)) / scale;
                out[(s * T + t) * C + c] = v;
            }
        }
    }
}

inline Tensor prepare_batch(const std::vector<const SeriesBlock*>& observed, const std::vector<const GapMask*>& masks,
                            double scale)
{
    if (observed.empty()) throw std::invalid_argument("prepare_batch: empty batch");
    if (!(scale > 0.0)) throw std::invalid_argument("prepare_batch: scale must be positive");
    const auto& f = *observed.front();
    const std::size_t per = f.size();
    std::vector<double> v(observed.size() * per);
    for (std::size_t b = 0; b < observed.size(); ++b) {
        if (!observed[b]->same_shape(f)) throw ShapeError("prepare_batch: windows differ in shape");
        prepare_window(*observed[b], masks.empty() ? nullptr : masks[b], scale, v.data() + b * per);
    }
    return Tensor({observed.size(), f.stations, f.days, f.comps}, std::move(v));
}

/// Eval-mode denoising of one window; output in mm.
inline SeriesBlock denoise_window(const ModelParams& p, const ModelConfig& c, const SeriesBlock& observed,
                                  const GapMask* mask, double scale)
{
    NoGradGuard guard;
    Tensor x = prepare_batch({&observed}, {mask}, scale);
    Tensor y = forward(p, c, x, false, nullptr);
    SeriesBlock out(observed.stations, observed.days, observed.comps);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = y[i] * scale;
    return out;
}

// ---------------------------------------------------------------------------
// Adjacency interpretation
// ---------------------------------------------------------------------------

struct Edge {
    std::size_t i = 0, j = 0;
    double strength = 0.0;
};

struct AdjacencyReport {
    std::vector<double> A;  // [N, N] row-major
    std::size_t stations = 0;
    double threshold = 0.008;
    std::vector<Edge> strong_edges;  // i < j, strength = max(A_ij, A_ji)
    std::vector<double> diagonal;

    std::size_t potential_edges() const { return stations + stations * (stations - 1) / 2; }
};

inline AdjacencyReport adjacency_report(const Tensor& E, double threshold = 0.008)
{
    NoGradGuard guard;
    Tensor A = compute_adjacency(E);
    AdjacencyReport r;
    r.stations = A.dim(0);
    r.threshold = threshold;
    r.A.assign(A.data().begin(), A.data().end());
    const std::size_t N = r.stations;
    for (std::size_t i = 0; i < N; ++i) {
        r.diagonal.push_back(r.A[i * N + i]);
        for (std::size_t j = i + 1; j < N; ++j) {
            double s = std::max(r.A[i * N + j], r.A[j * N + i]);
            if (s > threshold) r.strong_edges.push_back({i, j, s});
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    double input_scale = 1.0;  // mm per model unit
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    std::vector<std::string> stations;  // ids in node order, when known
    nlohmann::json metrics = nlohmann::json::object();
};

inline nlohmann::json config_json(const ModelConfig& c)
{
    return {{"stations", c.stations},       {"embed_dim", c.embed_dim},   {"hidden", c.hidden},
            {"model_dim", c.model_dim},     {"heads", c.heads},           {"ffn_dim", c.ffn()},
            {"layers", c.layers},           {"components", c.components}, {"attn_dropout", c.attn_dropout},
            {"out_dropout", c.out_dropout}, {"positional_encoding", c.positional_encoding},
            {"ablation", ablation_name(c.ablation)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j)
{
    ModelConfig c;
    c.stations = j.at("stations");
    c.embed_dim = j.at("embed_dim");
    c.hidden = j.at("hidden");
    c.model_dim = j.at("model_dim");
    c.heads = j.at("heads");
    c.ffn_dim = j.at("ffn_dim");
    c.layers = j.at("layers");
    c.components = j.at("components");
    c.attn_dropout = j.at("attn_dropout");
    c.out_dropout = j.at("out_dropout");
    c.positional_encoding = j.at("positional_encoding");
    c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    c.validate();
    return c;
}

inline std::string param_file_name(std::string name)
{
    for (auto& ch : name)
        if (ch == '.') ch = '_';
    return name + ".bin";
}

inline void save_checkpoint(Checkpoint& ck, const std::string& directory)
{
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    nlohmann::json j;
    j["config"] = config_json(ck.config);
    j["input_scale"] = ck.input_scale;
    j["seed"] = ck.seed;
    j["epoch"] = ck.epoch;
    j["metrics"] = ck.metrics;
    j["stations"] = ck.stations;
    nlohmann::json shapes = nlohmann::json::object();
    for (auto& [name, t] : ck.params.named()) {
        shapes[name] = {{"file", param_file_name(name)}, {"dtype", "float32"}, {"shape", t->shape()}};
        std::vector<float> buf(t->data().begin(), t->data().end());
        std::ofstream out(fs::path(directory) / param_file_name(name), std::ios::binary);
        if (!out) throw std::runtime_error("cannot write parameter " + name + " in " + directory);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    j["parameters"] = shapes;
    std::ofstream m(fs::path(directory) / "checkpoint.json");
    if (!m) throw std::runtime_error("cannot write " + directory + "/checkpoint.json");
    m << j.dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& directory)
{
    namespace fs = std::filesystem;
    const auto path = fs::path(directory) / "checkpoint.json";
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Checkpoint ck;
    nlohmann::json j;
    try {
        in >> j;
        ck.config = config_from_json(j.at("config"));
        ck.input_scale = j.at("input_scale");
        ck.seed = j.at("seed");
        ck.epoch = j.at("epoch");
        ck.metrics = j.at("metrics");
        if (j.contains("stations")) ck.stations = j.at("stations").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
    if (!ck.stations.empty() && ck.stations.size() != ck.config.stations)
        throw std::runtime_error(path.string() + ": station list does not match the configured station count");
    ck.params = init_params(ck.config, 0);
    for (auto& [name, t] : ck.params.named()) {
        const auto& entry = j.at("parameters").at(name);
        if (entry.at("shape").get<Shape>() != t->shape())
            throw std::runtime_error(path.string() + ": parameter " + name + " has shape " +
                                     to_string(entry.at("shape").get<Shape>()) + ", config implies " +
                                     to_string(t->shape()));
        const auto file = fs::path(directory) / entry.at("file").get<std::string>();
        std::ifstream b(file, std::ios::binary);
        std::vector<float> buf(t->size());
        b.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!b || static_cast<std::size_t>(b.gcount()) != buf.size() * sizeof(float) || b.peek() != EOF)
            throw std::runtime_error(file.string() + ": size does not match shape " + to_string(t->shape()));
        auto dst = t->mutable_data();
        std::copy(buf.begin(), buf.end(), dst.begin());
    }
    return ck;
}

}  // namespace ssed
