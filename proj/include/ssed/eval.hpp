#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssed/csv.hpp"
#include "ssed/dataset.hpp"
#include "ssed/model.hpp"
#include "ssed/training.hpp"

namespace ssed {

// ---------------------------------------------------------------------------
// Per-sample and aggregate error metrics
// ---------------------------------------------------------------------------

struct SampleError {
    double se = 0;  // sum of squared errors over stations, days, components
    double ae = 0;  // sum of absolute errors
};

inline SampleError sample_metrics(const SeriesBlock& d, const SeriesBlock& d_hat)
{
    if (!d.same_shape(d_hat)) throw std::invalid_argument("sample_metrics: shape mismatch");
    SampleError e;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double r = d.values[i] - d_hat.values[i];
        e.se += r * r;
        e.ae += std::abs(r);
    }
    return e;
}

struct MetricSummary {
    std::size_t count = 0;
    double mse = 0, sigma_se = 0;
    double mae = 0, sigma_ae = 0;
};

/// Mean and population standard deviation of the per-sample sums.
inline MetricSummary aggregate_metrics(const std::vector<SampleError>& errors)
{
    if (errors.empty()) throw std::invalid_argument("aggregate_metrics: no samples");
    MetricSummary m;
    m.count = errors.size();
    const double n = static_cast<double>(errors.size());
    for (const auto& e : errors) {
        m.mse += e.se;
        m.mae += e.ae;
    }
    m.mse /= n;
    m.mae /= n;
    for (const auto& e : errors) {
        m.sigma_se += (e.se - m.mse) * (e.se - m.mse);
        m.sigma_ae += (e.ae - m.mae) * (e.ae - m.mae);
    }
    m.sigma_se = std::sqrt(m.sigma_se / n);
    m.sigma_ae = std::sqrt(m.sigma_ae / n);
    return m;
}

// ---------------------------------------------------------------------------
// SNR and amplitude-relative error over recording stations
// ---------------------------------------------------------------------------

/// Default floor below which a station is treated as not having recorded the
/// displacement. The dislocation field never vanishes exactly, so a literal
/// d != 0 test would admit every station of every positive sample.
inline constexpr double kRecordFloorMm = 1.0;

/// Stations whose peak |d| reaches `floor` on every component. With floor 0
/// this is the literal d != 0 set.
inline std::vector<std::size_t> recording_stations(const SeriesBlock& d, double floor = kRecordFloorMm)
{
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < d.stations; ++s) {
        bool all = true;
        for (std::size_t c = 0; c < d.comps && all; ++c) {
            double peak = 0;
            for (std::size_t t = 0; t < d.days; ++t) peak = std::max(peak, std::abs(d(s, t, c)));
            all = floor > 0 ? peak >= floor : peak > 0;
        }
        if (all) out.push_back(s);
    }
    return out;
}

/// Average SNR in dB over recording stations and components; observed gaps are
/// left out of both power sums. Empty when no station recorded the event.
inline std::optional<double> average_snr(const SeriesBlock& observed, const SeriesBlock& noise, const SeriesBlock& d,
                                         double floor = kRecordFloorMm)
{
    if (!observed.same_shape(noise) || !observed.same_shape(d))
        throw std::invalid_argument("average_snr: shape mismatch");
    double sum = 0;
    std::size_t terms = 0;
    for (auto s : recording_stations(d, floor))
        for (std::size_t c = 0; c < d.comps; ++c) {
            double ps = 0, pn = 0;
            for (std::size_t t = 0; t < d.days; ++t) {
                const double xi = observed(s, t, c);
                if (std::isnan(xi)) continue;
                ps += xi * xi;
                pn += noise(s, t, c) * noise(s, t, c);
            }
            if (ps == 0 || pn == 0) continue;
            sum += 10.0 * std::log10(ps / pn);
            ++terms;
        }
    if (terms == 0) return std::nullopt;
    return sum / static_cast<double>(terms);
}

inline std::optional<double> average_snr(const WindowSample& w, double floor = kRecordFloorMm)
{
    return average_snr(w.observed, w.noise, w.clean, floor);
}

/// Time-mean absolute error divided by the peak |d|, averaged over recording
/// stations and components. Empty for samples without recording stations.
inline std::optional<double> denoising_error(const SeriesBlock& d, const SeriesBlock& d_hat,
                                             double floor = kRecordFloorMm)
{
    if (!d.same_shape(d_hat)) throw std::invalid_argument("denoising_error: shape mismatch");
    const auto rec = recording_stations(d, floor);
    if (rec.empty()) return std::nullopt;
    double sum = 0;
    for (auto s : rec)
        for (std::size_t c = 0; c < d.comps; ++c) {
            double peak = 0, abs_err = 0;
            for (std::size_t t = 0; t < d.days; ++t) {
                peak = std::max(peak, std::abs(d(s, t, c)));
                abs_err += std::abs(d(s, t, c) - d_hat(s, t, c));
            }
            if (!(peak > 0)) throw std::logic_error("denoising_error: recording station with zero peak");
            sum += abs_err / peak;
        }
    return sum / static_cast<double>(d.days * rec.size() * d.comps);
}

// ---------------------------------------------------------------------------
// Moving-window baselines
// ---------------------------------------------------------------------------

enum class FilterKind { mean, median };

inline FilterKind parse_filter_kind(const std::string& s)
{
    if (s == "mean") return FilterKind::mean;
    if (s == "median") return FilterKind::median;
    throw std::invalid_argument("unknown filter kind '" + s + "' (expected mean or median)");
}

inline const char* filter_name(FilterKind k) { return k == FilterKind::mean ? "mean" : "median"; }

/// Centered moving filter per station and component. Near the ends the window
/// shrinks symmetrically (day t uses half-width min(k/2, t, days-1-t)); NaN gaps
/// are skipped and a window with no observations yields 0.
inline SeriesBlock baseline_filter(const SeriesBlock& xi, FilterKind kind, std::size_t k)
{
    if (k == 0 || k % 2 == 0) throw std::invalid_argument("baseline_filter: kernel size must be odd");
    const std::size_t half = k / 2;
    SeriesBlock out(xi.stations, xi.days, xi.comps);
    std::vector<double> win;
    win.reserve(k);
    for (std::size_t s = 0; s < xi.stations; ++s)
        for (std::size_t c = 0; c < xi.comps; ++c)
            for (std::size_t t = 0; t < xi.days; ++t) {
                win.clear();
                const std::size_t h = std::min({half, t, xi.days - 1 - t});
                const std::size_t lo = t - h, hi = t + h;
                for (std::size_t u = lo; u <= hi; ++u)
                    if (!std::isnan(xi(s, u, c))) win.push_back(xi(s, u, c));
                double v = 0;
                if (!win.empty()) {
                    if (kind == FilterKind::mean) {
                        for (double x : win) v += x;
                        v /= static_cast<double>(win.size());
                    } else {
                        std::sort(win.begin(), win.end());
                        const std::size_t m = win.size() / 2;
                        v = win.size() % 2 ? win[m] : 0.5 * (win[m - 1] + win[m]);
                    }
                }
                out(s, t, c) = v;
            }
    return out;
}

// ---------------------------------------------------------------------------
// SNR binning and reports
// ---------------------------------------------------------------------------

struct SnrBinning {
    std::vector<double> edges;       // strictly increasing, size bins + 1
    std::vector<double> mean_error;  // NaN for empty bins
    std::vector<std::size_t> counts;

    std::size_t bins() const { return counts.size(); }
    double center(std::size_t b) const { return 0.5 * (edges[b] + edges[b + 1]); }
};

/// Unit-width bins on integer dB covering every value.
inline std::vector<double> default_snr_edges(const std::vector<double>& snr)
{
    if (snr.empty()) return {0.0, 1.0};
    const auto [lo, hi] = std::minmax_element(snr.begin(), snr.end());
    const double a = std::floor(*lo);
    double b = std::floor(*hi) + 1.0;
    std::vector<double> e;
    for (double x = a; x <= b; x += 1.0) e.push_back(x);
    return e;
}

/// Bin i holds [edges[i], edges[i+1]); values outside the edges go to the
/// nearest end bin so every sample is counted once.
inline SnrBinning bin_errors(const std::vector<double>& snr, const std::vector<double>& error,
                             std::vector<double> edges)
{
    if (snr.size() != error.size()) throw std::invalid_argument("bin_errors: snr and error sizes differ");
    if (edges.size() < 2) throw std::invalid_argument("bin_errors: need at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("bin_errors: edges must be strictly increasing");
    SnrBinning b;
    b.edges = std::move(edges);
    const std::size_t nb = b.edges.size() - 1;
    b.counts.assign(nb, 0);
    std::vector<double> sums(nb, 0.0);
    for (std::size_t i = 0; i < snr.size(); ++i) {
        const auto it = std::upper_bound(b.edges.begin(), b.edges.end(), snr[i]);
        std::ptrdiff_t k = (it - b.edges.begin()) - 1;
        k = std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(nb) - 1);
        sums[static_cast<std::size_t>(k)] += error[i];
        ++b.counts[static_cast<std::size_t>(k)];
    }
    b.mean_error.resize(nb);
    for (std::size_t k = 0; k < nb; ++k)
        b.mean_error[k] = b.counts[k] ? sums[k] / static_cast<double>(b.counts[k])
                                      : std::numeric_limits<double>::quiet_NaN();
    return b;
}

/// Mean of the non-empty bin means whose range lies within [lo, hi].
inline std::optional<double> mean_over_bins(const SnrBinning& b, double lo, double hi)
{
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < b.bins(); ++k)
        if (b.counts[k] > 0 && b.edges[k] >= lo && b.edges[k + 1] <= hi) {
            sum += b.mean_error[k];
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct MetricsReport {
    std::string model;
    MetricSummary summary;
    std::vector<SampleError> per_sample;
    std::vector<std::size_t> indices;
    std::vector<double> snr;            // positive samples only
    std::vector<double> relative_error; // E(i), aligned with snr
    double mean_relative_error = std::numeric_limits<double>::quiet_NaN();
    double record_floor_mm = kRecordFloorMm;
    SnrBinning binning;
};

/// Metrics for predictions aligned with `indices` (one block per sample).
inline MetricsReport evaluate_predictions(const Dataset& ds, const std::vector<std::size_t>& indices,
                                          const std::vector<SeriesBlock>& predictions, const std::string& name,
                                          std::vector<double> edges = {}, double floor = kRecordFloorMm)
{
    if (indices.size() != predictions.size())
        throw std::invalid_argument("evaluate: prediction count differs from sample count");
    MetricsReport r;
    r.model = name;
    r.indices = indices;
    r.record_floor_mm = floor;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& w = ds.samples.at(indices[k]);
        r.per_sample.push_back(sample_metrics(w.clean, predictions[k]));
        auto snr = average_snr(w, floor);
        auto err = denoising_error(w.clean, predictions[k], floor);
        if (snr && err) {
            r.snr.push_back(*snr);
            r.relative_error.push_back(*err);
        }
    }
    r.summary = aggregate_metrics(r.per_sample);
    if (!r.relative_error.empty()) {
        double s = 0;
        for (double e : r.relative_error) s += e;
        r.mean_relative_error = s / static_cast<double>(r.relative_error.size());
    }
    if (edges.empty()) edges = default_snr_edges(r.snr);
    r.binning = bin_errors(r.snr, r.relative_error, std::move(edges));
    return r;
}

inline std::vector<SeriesBlock> baseline_predictions(const Dataset& ds, const std::vector<std::size_t>& indices,
                                                     FilterKind kind, std::size_t k)
{
    std::vector<SeriesBlock> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(baseline_filter(ds.samples.at(i).observed, kind, k));
    return out;
}

inline std::vector<SeriesBlock> model_predictions(const Checkpoint& ck, const Dataset& ds,
                                                  const std::vector<std::size_t>& indices)
{
    if (ck.config.stations != ds.manifest.stations)
        throw std::invalid_argument("evaluate: checkpoint expects " + std::to_string(ck.config.stations) +
                                    " stations, dataset has " + std::to_string(ds.manifest.stations));
    auto split = prepare_split(ds, indices, ck.input_scale);
    auto flat = predict_split(ck.params, ck.config, split, ck.input_scale);
    std::vector<SeriesBlock> out;
    out.reserve(indices.size());
    const std::size_t per = split.per();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        SeriesBlock b(split.stations, split.days, split.comps);
        std::copy_n(flat.data() + k * per, per, b.values.data());
        out.push_back(std::move(b));
    }
    return out;
}

inline nlohmann::json report_json(const MetricsReport& r)
{
    auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json bins = nlohmann::json::array();
    for (std::size_t k = 0; k < r.binning.bins(); ++k)
        bins.push_back({{"lo_db", r.binning.edges[k]},
                        {"hi_db", r.binning.edges[k + 1]},
                        {"mean_error", finite_or_null(r.binning.mean_error[k])},
                        {"count", r.binning.counts[k]}});
    return {{"model", r.model},
            {"samples", r.summary.count},
            {"mse", r.summary.mse},
            {"sigma_se", r.summary.sigma_se},
            {"mae", r.summary.mae},
            {"sigma_ae", r.summary.sigma_ae},
            {"positive_samples", r.snr.size()},
            {"mean_relative_error", finite_or_null(r.mean_relative_error)},
            {"record_floor_mm", r.record_floor_mm},
            {"snr_bins", bins}};
}

/// Error-versus-SNR curve: bin_center_db,mean_error,count (empty bins omitted).
inline void write_snr_curve(const SnrBinning& b, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "bin_center_db,mean_error,count\n";
    for (std::size_t k = 0; k < b.bins(); ++k)
        if (b.counts[k] > 0)
            out << format_value(b.center(k)) << ',' << format_value(b.mean_error[k]) << ',' << b.counts[k] << '\n';
}

/// One Table-1-style row per report: model, MSE, sigma_SE, MAE, sigma_AE.
inline std::string comparison_table(const std::vector<MetricsReport>& reports)
{
    std::string s = "model,mse,sigma_se,mae,sigma_ae\n";
    for (const auto& r : reports)
        s += r.model + ',' + format_value(r.summary.mse) + ',' + format_value(r.summary.sigma_se) + ',' +
             format_value(r.summary.mae) + ',' + format_value(r.summary.sigma_ae) + '\n';
    return s;
}

}  // namespace ssed
