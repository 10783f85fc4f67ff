#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssed/csv.hpp"
#include "ssed/dataset.hpp"
#include "ssed/model.hpp"

namespace ssed {

struct TrainConfig {
    std::size_t batch_size = 128;
    std::size_t max_epochs = 50;
    std::size_t patience = 10;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 5.0;  // global gradient norm; <= 0 disables
    double lr_decay = 1.0;            // multiply the rate by this after a plateau; 1 disables
    std::size_t lr_decay_patience = 3;  // epochs without improvement that count as a plateau
    double min_learning_rate = 0.0;
    std::uint64_t seed = 1;

    void validate() const
    {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
        if (learning_rate < 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("TrainConfig: Adam betas must lie in [0,1)");
        if (adam_eps <= 0.0) throw std::invalid_argument("TrainConfig: adam_eps must be > 0");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("TrainConfig: lr_decay must lie in (0,1]");
        if (lr_decay_patience < 1) throw std::invalid_argument("TrainConfig: lr_decay_patience must be >= 1");
        if (min_learning_rate < 0.0) throw std::invalid_argument("TrainConfig: min_learning_rate must be >= 0");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_mse = 0.0;  // NaN for epoch 0 (initial parameters)
    double val_mse = 0.0;
    double seconds = 0.0;
    double learning_rate = 0.0;  // rate in effect during the epoch
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_mse = 0.0;
    double wall_seconds = 0.0;
};

/// Mean of squared differences over every axis (mm² when both are in mm).
inline Tensor mse_loss(const Tensor& target, const Tensor& prediction)
{
    if (target.shape() != prediction.shape())
        throw ShapeError("mse_loss: target " + to_string(target.shape()) + " vs prediction " +
                         to_string(prediction.shape()));
    Tensor d = sub(prediction, target);
    return mean(mul(d, d));
}

/// Adam with bias correction over a fixed list of parameter leaves.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps)
    {
        for (auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step()
    {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            auto x = p.mutable_data();
            auto g = p.grad();
            for (std::size_t i = 0; i < x.size(); ++i) {
                m_[k][i] = b1_ * m_[k][i] + (1.0 - b1_) * g[i];
                v_[k][i] = b2_ * v_[k][i] + (1.0 - b2_) * g[i] * g[i];
                x[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
            }
        }
    }

    void zero_grad()
    {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t steps() const { return t_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm)
{
    double ss = 0;
    for (auto& p : params)
        if (p.has_grad())
            for (double g : p.grad()) ss += g * g;
    const double norm = std::sqrt(ss);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& p : params)
            if (p.has_grad())
                for (auto& g : p.mutable_grad()) g *= s;
    }
    return norm;
}

/// Model inputs and targets for a set of samples, prepared once.
struct PreparedSplit {
    std::vector<std::size_t> indices;
    std::size_t stations = 0, days = 0, comps = 0;
    std::vector<double> inputs;   // scaled, detrended, gap-filled
    std::vector<double> targets;  // clean signal, mm
    std::vector<double> observed; // raw observed (NaN gaps), mm

    std::size_t per() const { return stations * days * comps; }
    std::size_t size() const { return indices.size(); }
};

inline PreparedSplit prepare_split(const Dataset& ds, const std::vector<std::size_t>& indices, double scale)
{
    PreparedSplit s;
    s.indices = indices;
    s.stations = ds.manifest.stations;
    s.days = ds.manifest.window_days;
    s.comps = ds.manifest.components;
    const std::size_t per = s.per();
    s.inputs.resize(indices.size() * per);
    s.targets.resize(indices.size() * per);
    s.observed.resize(indices.size() * per);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& w = ds.samples.at(indices[k]);
        prepare_window(w.observed, &w.mask, scale, s.inputs.data() + k * per);
        std::copy(w.clean.values.begin(), w.clean.values.end(), s.targets.begin() + static_cast<std::ptrdiff_t>(k * per));
        std::copy(w.observed.values.begin(), w.observed.values.end(),
                  s.observed.begin() + static_cast<std::ptrdiff_t>(k * per));
    }
    return s;
}

namespace train_detail {

inline Tensor gather(const std::vector<double>& src, const PreparedSplit& s, const std::size_t* order, std::size_t n)
{
    const std::size_t per = s.per();
    std::vector<double> v(n * per);
    for (std::size_t b = 0; b < n; ++b)
        std::copy_n(src.data() + order[b] * per, per, v.data() + b * per);
    return Tensor({n, s.stations, s.days, s.comps}, std::move(v));
}

}  // namespace train_detail

/// Eval-mode predictions in mm for every sample of the split, [n * per].
inline std::vector<double> predict_split(const ModelParams& p, const ModelConfig& c, const PreparedSplit& s,
                                         double scale, std::size_t batch = 64)
{
    NoGradGuard guard;
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> out(s.size() * s.per());
    for (std::size_t start = 0; start < s.size(); start += batch) {
        const std::size_t n = std::min(batch, s.size() - start);
        Tensor y = forward(p, c, train_detail::gather(s.inputs, s, order.data() + start, n));
        for (std::size_t i = 0; i < y.size(); ++i) out[start * s.per() + i] = y[i] * scale;
    }
    return out;
}

inline double split_mse(const ModelParams& p, const ModelConfig& c, const PreparedSplit& s, double scale,
                        std::size_t batch = 64)
{
    auto pred = predict_split(p, c, s, scale, batch);
    double ss = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - s.targets[i];
        ss += d * d;
    }
    return ss / static_cast<double>(pred.size());
}

struct TrainResult {
    Checkpoint best;
    TrainLog log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on the training split, validation MSE after every epoch
/// (epoch 0 is the untrained model), best-validation parameters kept, early
/// stop after `patience` epochs without improvement.
inline TrainResult train(const Dataset& ds, ModelConfig mc, const TrainConfig& tc, const EpochCallback& on_epoch = {})
{
    tc.validate();
    mc.stations = ds.manifest.stations;
    mc.validate();
    if (ds.manifest.train.empty() || ds.manifest.val.empty())
        throw std::invalid_argument("train: dataset needs non-empty training and validation splits");
    const double scale = ds.manifest.noise_std;
    const auto wall0 = std::chrono::steady_clock::now();
    auto train_set = prepare_split(ds, ds.manifest.train, scale);
    auto val_set = prepare_split(ds, ds.manifest.val, scale);

    TrainResult result;
    auto& ck = result.best;
    ck.config = mc;
    ck.seed = tc.seed;
    ck.input_scale = scale;
    for (const auto& st : ds.network.stations) ck.stations.push_back(st.id);
    ModelParams params = init_params(mc, tc.seed);
    std::vector<Tensor> leaves = params.tensors();
    Adam opt(leaves, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps);

    auto snapshot = [&](std::size_t epoch) {
        ck.params = init_params(mc, tc.seed);
        auto src = params.named(), dst = ck.params.named();
        for (std::size_t k = 0; k < src.size(); ++k) {
            auto d = dst[k].second->mutable_data();
            std::copy(src[k].second->data().begin(), src[k].second->data().end(), d.begin());
        }
        ck.epoch = epoch;
    };

    auto& log = result.log;
    {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord r{0, std::numeric_limits<double>::quiet_NaN(), split_mse(params, mc, val_set, scale), 0.0,
                      tc.learning_rate};
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(r);
        log.best_epoch = 0;
        log.best_val_mse = r.val_mse;
        snapshot(0);
        if (on_epoch) on_epoch(r);
    }

    std::vector<std::size_t> order(train_set.size());
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = make_stream(tc.seed, {0x5f1e, epoch});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0, max_norm = 0;
        std::size_t batch_no = 0;
        auto where = [&] {
            std::ostringstream o;
            o << " at epoch " << epoch << ", batch " << batch_no << " (max gradient norm so far " << max_norm << ')';
            return o.str();
        };
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++batch_no) {
            const std::size_t n = std::min(tc.batch_size, order.size() - start);
            Tensor x = train_detail::gather(train_set.inputs, train_set, order.data() + start, n);
            Tensor d = train_detail::gather(train_set.targets, train_set, order.data() + start, n);
            Rng drop = make_stream(tc.seed, {epoch, batch_no});
            Tape::current().clear();
            opt.zero_grad();
            Tensor loss = mse_loss(d, affine(forward(params, mc, x, true, &drop), scale));
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                Tape::current().clear();
                throw std::runtime_error("train: non-finite loss" + where());
            }
            backward(loss);
            const double norm = clip_grad_norm(leaves, tc.clip_norm);
            if (!std::isfinite(norm)) {
                Tape::current().clear();
                throw std::runtime_error("train: non-finite gradient norm" + where());
            }
            max_norm = std::max(max_norm, norm);
            opt.step();
            loss_sum += lv * static_cast<double>(n);
        }
        EpochRecord r;
        r.epoch = epoch;
        r.train_mse = loss_sum / static_cast<double>(order.size());
        r.learning_rate = opt.learning_rate();
        r.val_mse = split_mse(params, mc, val_set, scale);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(r);
        if (on_epoch) on_epoch(r);
        if (r.val_mse < log.best_val_mse) {
            log.best_val_mse = r.val_mse;
            log.best_epoch = epoch;
            snapshot(epoch);
            since_best = 0;
        } else if (++since_best >= tc.patience) {
            break;
        } else if (tc.lr_decay < 1.0 && since_best % tc.lr_decay_patience == 0) {
            opt.set_learning_rate(std::max(tc.min_learning_rate, opt.learning_rate() * tc.lr_decay));
        }
    }
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    ck.metrics = {{"best_val_mse", log.best_val_mse},
                  {"epoch0_val_mse", log.epochs.front().val_mse},
                  {"epochs_run", log.epochs.size() - 1}};
    return result;
}

inline nlohmann::json epoch_json(const EpochRecord& r)
{
    nlohmann::json j{
        {"epoch", r.epoch}, {"val_mse", r.val_mse}, {"seconds", r.seconds}, {"learning_rate", r.learning_rate}};
    j["train_mse"] = std::isfinite(r.train_mse) ? nlohmann::json(r.train_mse) : nlohmann::json(nullptr);
    return j;
}

inline void write_train_log(const TrainLog& log, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& r : log.epochs) out << epoch_json(r).dump() << '\n';
    out << nlohmann::json{{"best_epoch", log.best_epoch}, {"best_val_mse", log.best_val_mse},
                          {"wall_seconds", log.wall_seconds}}
               .dump()
        << '\n';
}

// ---------------------------------------------------------------------------
// Flat key=value configuration
// ---------------------------------------------------------------------------

/// `key = value` per line; '#' starts a comment.
inline std::map<std::string, std::string> read_key_values(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
        auto hash = line.find('#');
        auto v = trim(std::string_view(line).substr(0, hash));
        if (v.empty()) continue;
        auto eq = v.find('=');
        if (eq == std::string_view::npos)
            throw std::runtime_error(path + ":" + std::to_string(no) + ": expected key = value");
        std::string key(trim(v.substr(0, eq)));
        if (!kv.emplace(key, std::string(trim(v.substr(eq + 1)))).second)
            throw std::runtime_error(path + ":" + std::to_string(no) + ": duplicate key '" + key + "'");
    }
    return kv;
}

inline void apply_config(const std::map<std::string, std::string>& kv, ModelConfig& mc, TrainConfig& tc)
{
    auto size = [](const std::string& k, const std::string& v) {
        std::size_t out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size())
            throw std::invalid_argument("config: '" + k + "' expects a non-negative integer, got '" + v + "'");
        return out;
    };
    auto real = [](const std::string& k, const std::string& v) {
        try {
            return parse_double(v);
        } catch (const std::invalid_argument&) {
            throw std::invalid_argument("config: '" + k + "' expects a number, got '" + v + "'");
        }
    };
    auto flag = [](const std::string& k, const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("config: '" + k + "' expects true/false, got '" + v + "'");
    };
    for (const auto& [k, v] : kv) {
        if (k == "embed_dim") mc.embed_dim = size(k, v);
        else if (k == "hidden") mc.hidden = size(k, v);
        else if (k == "model_dim") mc.model_dim = size(k, v);
        else if (k == "heads") mc.heads = size(k, v);
        else if (k == "ffn_dim") mc.ffn_dim = size(k, v);
        else if (k == "layers") mc.layers = size(k, v);
        else if (k == "attn_dropout") mc.attn_dropout = real(k, v);
        else if (k == "out_dropout") mc.out_dropout = real(k, v);
        else if (k == "positional_encoding") mc.positional_encoding = flag(k, v);
        else if (k == "ablation") mc.ablation = parse_ablation(v);
        else if (k == "batch_size") tc.batch_size = size(k, v);
        else if (k == "max_epochs") tc.max_epochs = size(k, v);
        else if (k == "patience") tc.patience = size(k, v);
        else if (k == "learning_rate") tc.learning_rate = real(k, v);
        else if (k == "beta1") tc.beta1 = real(k, v);
        else if (k == "beta2") tc.beta2 = real(k, v);
        else if (k == "adam_eps") tc.adam_eps = real(k, v);
        else if (k == "clip_norm") tc.clip_norm = real(k, v);
        else if (k == "lr_decay") tc.lr_decay = real(k, v);
        else if (k == "lr_decay_patience") tc.lr_decay_patience = size(k, v);
        else if (k == "min_learning_rate") tc.min_learning_rate = real(k, v);
        else if (k == "seed") tc.seed = size(k, v);
        else throw std::invalid_argument("config: unknown key '" + k + "'");
    }
    mc.validate();
    tc.validate();
}

}  // namespace ssed
