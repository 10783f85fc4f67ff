#pragma once

// Synthetic training windows: surrogate noise sharing the spatial covariance
// and spectra of a reference residual set, logistic-ramp slow-slip signals
// driven by rectangular dislocations, and gap masks drawn from the reference
// gap statistics.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssed/fft.hpp"
#include "ssed/okada.hpp"
#include "ssed/random.hpp"
#include "ssed/series.hpp"

namespace ssed {

// ---------------------------------------------------------------------------
// Noise model
// ---------------------------------------------------------------------------

struct NoiseModel {
    std::size_t stations = 0;
    std::size_t span_days = 0;
    Eigen::MatrixXd basis;              // [stations*2, K], orthonormal columns
    std::vector<double> eigenvalues;    // [K], descending
    std::vector<std::vector<double>> spectra;  // [K][span_days] FFT magnitudes of the scores
    // Per station: gap-length histogram (length -> count) and gap-day total.
    std::vector<std::map<std::size_t, std::size_t>> gap_lengths;
    std::vector<std::size_t> gap_days;

    std::size_t components() const { return eigenvalues.size(); }
    bool fitted() const { return stations > 0 && span_days > 0 && !eigenvalues.empty(); }

    /// Expected fraction of gap days per station, from the histogram.
    double expected_gap_fraction() const
    {
        if (gap_days.empty() || span_days == 0) return 0.0;
        double s = 0;
        for (auto g : gap_days) s += static_cast<double>(g);
        return s / (static_cast<double>(span_days) * static_cast<double>(gap_days.size()));
    }

    /// Covariance implied by the retained components, [2N, 2N].
    Eigen::MatrixXd covariance() const
    {
        Eigen::VectorXd lam = Eigen::Map<const Eigen::VectorXd>(eigenvalues.data(),
                                                                static_cast<Eigen::Index>(eigenvalues.size()));
        return basis * lam.asDiagonal() * basis.transpose();
    }
};

namespace synth_detail {

/// Runs of consecutive gap days for one station.
inline std::map<std::size_t, std::size_t> gap_runs(const SeriesBlock& r, std::size_t s,
                                                   std::size_t& total)
{
    std::map<std::size_t, std::size_t> hist;
    std::size_t run = 0;
    total = 0;
    auto is_gap = [&](std::size_t t) {
        for (std::size_t c = 0; c < r.comps; ++c)
            if (!std::isfinite(r(s, t, c))) return true;
        return false;
    };
    for (std::size_t t = 0; t <= r.days; ++t) {
        if (t < r.days && is_gap(t)) {
            ++run;
            ++total;
        } else if (run > 0) {
            ++hist[run];
            run = 0;
        }
    }
    return hist;
}

/// Linear interpolation across gaps; leading/trailing gaps take the nearest value.
inline std::vector<double> interpolate_gaps(std::vector<double> y)
{
    const std::size_t n = y.size();
    std::ptrdiff_t prev = -1;
    for (std::size_t t = 0; t < n; ++t) {
        if (!std::isfinite(y[t])) continue;
        if (prev < 0) {
            for (std::size_t k = 0; k < t; ++k) y[k] = y[t];
        } else if (static_cast<std::size_t>(prev) + 1 < t) {
            double a = y[static_cast<std::size_t>(prev)], b = y[t];
            double span = static_cast<double>(t - static_cast<std::size_t>(prev));
            for (std::size_t k = static_cast<std::size_t>(prev) + 1; k < t; ++k)
                y[k] = a + (b - a) * static_cast<double>(k - static_cast<std::size_t>(prev)) / span;
        }
        prev = static_cast<std::ptrdiff_t>(t);
    }
    if (prev < 0) throw std::invalid_argument("interpolate_gaps: series has no observations");
    for (std::size_t k = static_cast<std::size_t>(prev) + 1; k < n; ++k)
        y[k] = y[static_cast<std::size_t>(prev)];
    return y;
}

}  // namespace synth_detail

/// Principal components of the station x component covariance of the
/// residuals, with the FFT magnitude spectrum of every retained score series
/// and the empirical gap-length statistics.
inline NoiseModel fit_noise_model(const SeriesBlock& residuals)
{
    if (residuals.days < 365)
        throw std::invalid_argument("fit_noise_model: fitting span must cover at least 365 days");
    if (residuals.stations == 0) throw std::invalid_argument("fit_noise_model: no stations");
    const std::size_t N = residuals.stations, T = residuals.days, C = residuals.comps;

    NoiseModel m;
    m.stations = N;
    m.span_days = T;
    m.gap_lengths.resize(N);
    m.gap_days.resize(N);
    for (std::size_t s = 0; s < N; ++s) {
        m.gap_lengths[s] = synth_detail::gap_runs(residuals, s, m.gap_days[s]);
        if (2 * m.gap_days[s] >= T)
            throw std::invalid_argument("fit_noise_model: station " + std::to_string(s) +
                                        " has 50% or more missing days");
    }

    Eigen::MatrixXd X(static_cast<Eigen::Index>(N * C), static_cast<Eigen::Index>(T));
    for (std::size_t s = 0; s < N; ++s)
        for (std::size_t c = 0; c < C; ++c) {
            std::vector<double> y(T);
            for (std::size_t t = 0; t < T; ++t) y[t] = residuals(s, t, c);
            y = synth_detail::interpolate_gaps(std::move(y));
            double mu = 0;
            for (double v : y) mu += v;
            mu /= static_cast<double>(T);
            for (std::size_t t = 0; t < T; ++t)
                X(static_cast<Eigen::Index>(s * C + c), static_cast<Eigen::Index>(t)) = y[t] - mu;
        }

    Eigen::MatrixXd cov = X * X.transpose() / static_cast<double>(T);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd& ev = eig.eigenvalues();  // ascending
    const double largest = ev(ev.size() - 1);
    if (!(largest > 0.0)) throw std::invalid_argument("fit_noise_model: degenerate (zero) covariance");

    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = ev.size(); i-- > 0;)
        if (ev(i) > 1e-10 * largest) keep.push_back(i);
    m.basis.resize(X.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        m.basis.col(static_cast<Eigen::Index>(k)) = eig.eigenvectors().col(keep[k]);
        m.eigenvalues.push_back(ev(keep[k]));
    }

    Eigen::MatrixXd scores = m.basis.transpose() * X;  // [K, T]
    RealFft fft(T);
    for (Eigen::Index k = 0; k < scores.rows(); ++k) {
        std::vector<double> row(T);
        for (std::size_t t = 0; t < T; ++t) row[t] = scores(k, static_cast<Eigen::Index>(t));
        m.spectra.push_back(fft.magnitudes(row));
    }
    return m;
}

/// Phase-randomized surrogate of one retained score series: stored
/// magnitudes, uniform random phases with Hermitian symmetry. Full span length.
inline std::vector<double> surrogate_scores(const NoiseModel& model, std::size_t component, Rng& rng,
                                            RealFft& fft)
{
    const auto& mag = model.spectra.at(component);
    const std::size_t T = model.span_days;
    std::vector<std::complex<double>> spec(T / 2 + 1);
    spec[0] = {mag[0], 0.0};
    for (std::size_t k = 1; k < spec.size(); ++k) {
        if (T % 2 == 0 && k == T / 2) {
            spec[k] = {mag[k], 0.0};
        } else {
            double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
            spec[k] = std::polar(mag[k], phi);
        }
    }
    return fft.inverse(spec);
}

/// Joint surrogate noise window [stations, length, 2]: every component is
/// phase-randomized independently, cropped at one shared random offset and
/// recombined through the spatial basis.
inline SeriesBlock sample_noise(const NoiseModel& model, std::size_t length, Rng& rng)
{
    if (!model.fitted()) throw std::logic_error("sample_noise: noise model is not fitted");
    if (length > model.span_days) throw std::invalid_argument("sample_noise: window exceeds fitting span");
    RealFft fft(model.span_days);
    const std::size_t K = model.components();
    std::vector<std::vector<double>> scores(K);
    for (std::size_t k = 0; k < K; ++k) scores[k] = surrogate_scores(model, k, rng, fft);
    std::uniform_int_distribution<std::size_t> pick(0, model.span_days - length);
    const std::size_t start = pick(rng);

    SeriesBlock out(model.stations, length);
    for (std::size_t s = 0; s < model.stations; ++s)
        for (std::size_t c = 0; c < kComponents; ++c) {
            const auto row = static_cast<Eigen::Index>(s * kComponents + c);
            for (std::size_t t = 0; t < length; ++t) {
                double v = 0;
                for (std::size_t k = 0; k < K; ++k)
                    v += model.basis(row, static_cast<Eigen::Index>(k)) * scores[k][start + t];
                out(s, t, c) = v;
            }
        }
    return out;
}

/// Alternating renewal process per station: gaps start on observed days with
/// the empirical start rate and take lengths from the station's histogram, so
/// the long-run gap fraction matches the reference.
inline GapMask sample_gap_mask(const NoiseModel& model, std::size_t length, Rng& rng)
{
    GapMask mask(model.stations, length);
    constexpr std::size_t burn_in = 365;
    for (std::size_t s = 0; s < model.stations; ++s) {
        const auto& hist = model.gap_lengths[s];
        if (hist.empty()) continue;
        std::size_t gaps = 0;
        std::vector<std::size_t> lengths;
        std::vector<double> weights;
        for (auto [len, count] : hist) {
            gaps += count;
            lengths.push_back(len);
            weights.push_back(static_cast<double>(count));
        }
        const double observed = static_cast<double>(model.span_days - model.gap_days[s]);
        const double p_start = std::min(1.0, static_cast<double>(gaps) / observed);
        std::bernoulli_distribution starts(p_start);
        std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
        std::size_t remaining = 0;
        for (std::size_t step = 0; step < burn_in + length; ++step) {
            if (remaining == 0 && starts(rng)) remaining = lengths[pick(rng)];
            if (remaining > 0) {
                if (step >= burn_in) mask.set(s, step - burn_in, true);
                --remaining;
            }
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Built-in reference data (used when no residual files are supplied)
// ---------------------------------------------------------------------------

struct FallbackNoiseConfig {
    std::size_t span_days = 2000;
    double spectral_index = -0.8;    // PSD ~ f^index
    double correlation_km = 150.0;   // exponential spatial e-folding length
    double sigma_mm = 2.0;           // per-channel standard deviation
    double gap_start_probability = 0.004;
    double mean_gap_days = 5.0;
};

/// Stations scattered uniformly over a lat/lon box, ids P000, P001, ...
inline StationNetwork synthetic_network(std::size_t n, std::uint64_t seed, double lat_lo = 43.0,
                                        double lat_hi = 49.0, double lon_lo = -124.4,
                                        double lon_hi = -121.6)
{
    Rng rng = make_stream(seed, {0x57a7});
    StationNetwork net;
    for (std::size_t i = 0; i < n; ++i) {
        char id[24];
        std::snprintf(id, sizeof id, "P%03zu", i);
        double lat = uniform(rng, lat_lo, lat_hi);
        double lon = uniform(rng, lon_lo, lon_hi);
        net.stations.push_back({id, lat, lon});
    }
    std::sort(net.stations.begin(), net.stations.end(),
              [](const Station& a, const Station& b) { return a.lat < b.lat; });
    for (std::size_t i = 0; i < n; ++i) {
        char id[24];
        std::snprintf(id, sizeof id, "P%03zu", i);
        net.stations[i].id = id;
    }
    return net;
}

/// Power-law temporal noise with exponential spatial correlation, plus gaps
/// (NaN) from a renewal process.
inline SeriesBlock synthetic_residuals(const StationNetwork& net, const FallbackNoiseConfig& cfg,
                                       Rng& rng)
{
    const std::size_t N = net.size(), T = cfg.span_days;
    if (N == 0) throw std::invalid_argument("synthetic_residuals: empty network");
    RealFft fft(T);

    // Independent unit-variance power-law series per station/component.
    std::vector<std::vector<double>> base(N * kComponents);
    for (auto& series : base) {
        std::vector<double> white(T);
        for (auto& w : white) w = normal(rng);
        auto spec = fft.forward(white);
        spec[0] = 0.0;
        for (std::size_t k = 1; k < spec.size(); ++k)
            spec[k] *= std::pow(static_cast<double>(k) / static_cast<double>(T), cfg.spectral_index / 2.0);
        series = fft.inverse(spec);
        double var = 0;
        for (double v : series) var += v * v;
        var /= static_cast<double>(T);
        for (auto& v : series) v /= std::sqrt(var);
    }

    // Spatial mixing through the Cholesky factor of exp(-d / L).
    const GeoOrigin origin{net.stations[0].lat, net.stations[0].lon};
    std::vector<LocalPoint> xy;
    for (const auto& s : net.stations) xy.push_back(to_local(s.lat, s.lon, origin));
    Eigen::MatrixXd C(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N));
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            double d = std::hypot(xy[i].east_km - xy[j].east_km, xy[i].north_km - xy[j].north_km);
            C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::exp(-d / cfg.correlation_km);
        }
    Eigen::LLT<Eigen::MatrixXd> llt(C);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("synthetic_residuals: spatial covariance is not positive definite");
    Eigen::MatrixXd L = llt.matrixL();

    SeriesBlock out(N, T);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < kComponents; ++c)
            for (std::size_t t = 0; t < T; ++t) {
                double v = 0;
                for (std::size_t j = 0; j <= i; ++j)
                    v += L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                         base[j * kComponents + c][t];
                out(i, t, c) = cfg.sigma_mm * v;
            }

    std::bernoulli_distribution starts(cfg.gap_start_probability);
    std::geometric_distribution<std::size_t> extra(1.0 / cfg.mean_gap_days);
    for (std::size_t i = 0; i < N; ++i) {
        std::size_t remaining = 0;
        for (std::size_t t = 0; t < T; ++t) {
            if (remaining == 0 && starts(rng)) remaining = 1 + extra(rng);
            if (remaining > 0) {
                for (std::size_t c = 0; c < kComponents; ++c) out(i, t, c) = kGapSentinel;
                --remaining;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Slow-slip signals
// ---------------------------------------------------------------------------

/// Growth rate of the logistic ramp such that the displacement goes from
/// gamma*D to (1-gamma)*D over `duration` days.
inline double logistic_rate(double duration, double gamma = 0.01)
{
    if (!(duration > 0.0)) throw std::invalid_argument("logistic_rate: duration must be positive");
    if (!(gamma > 0.0 && gamma < 0.5)) throw std::invalid_argument("logistic_rate: gamma must lie in (0, 0.5)");
    return 2.0 / duration * std::log(1.0 / gamma - 1.0);
}

inline double logistic_value(double amplitude, double t, double t0, double rate)
{
    return amplitude / (1.0 + std::exp(-rate * (t - t0)));
}

/// Displacement time series [stations, days, 2] of a static offset field
/// released along a logistic ramp, sampled at integer days 0..days-1.
inline SeriesBlock logistic_ramp(const StaticField& field, double t0, double duration,
                                 double gamma = 0.01, std::size_t days = kWindowDays)
{
    const double beta = logistic_rate(duration, gamma);
    SeriesBlock out(field.size(), days);
    for (std::size_t t = 0; t < days; ++t) {
        const double shape = 1.0 / (1.0 + std::exp(-beta * (static_cast<double>(t) - t0)));
        for (std::size_t s = 0; s < field.size(); ++s)
            for (std::size_t c = 0; c < kComponents; ++c) out(s, t, c) = field.enu[s][c] * shape;
    }
    return out;
}

/// Planar subduction band hosting the synthetic events.
struct SlabConfig {
    GeoOrigin trench{46.0, -125.2};  // a point on the trench line
    double strike_deg = 350.0;
    double dip_deg = 12.0;
    double depth_min_km = 20.0;
    double depth_max_km = 40.0;
    double depth_jitter_km = 10.0;
    double half_length_km = 300.0;  // along-strike extent on each side of `trench`
    double magnitude_min = 6.0;
    double magnitude_max = 7.0;
    double rake_min_deg = 80.0;
    double rake_max_deg = 100.0;
    double t0_min_days = 0.0;
    double t0_max_days = 60.0;
    double duration_min_days = 10.0;
    double duration_max_days = 30.0;
    ElasticScaling elastic;
};

/// 0-3 events with equal probability, each with independent parameters.
inline std::vector<DislocationSource> sample_sources(const SlabConfig& slab, Rng& rng)
{
    std::uniform_int_distribution<int> count(0, 3);
    const int n = count(rng);
    const double s = slab.strike_deg * kDegToRad;
    const double dip_az = s + std::numbers::pi / 2.0;
    std::vector<DislocationSource> out;
    for (int i = 0; i < n; ++i) {
        DislocationSource src;
        const double along = uniform(rng, -slab.half_length_km, slab.half_length_km);
        const double slab_depth = uniform(rng, slab.depth_min_km, slab.depth_max_km);
        const double across = slab_depth / std::tan(slab.dip_deg * kDegToRad);
        LocalPoint p{along * std::sin(s) + across * std::sin(dip_az),
                     along * std::cos(s) + across * std::cos(dip_az)};
        auto g = from_local(p, slab.trench);
        src.lat = g.lat;
        src.lon = g.lon;
        src.depth_km = slab_depth + uniform(rng, -slab.depth_jitter_km, slab.depth_jitter_km);
        src.strike_deg = slab.strike_deg;
        src.dip_deg = slab.dip_deg;
        src.rake_deg = uniform(rng, slab.rake_min_deg, slab.rake_max_deg);
        src.magnitude = uniform(rng, slab.magnitude_min, slab.magnitude_max);
        auto geom = magnitude_to_geometry(src.magnitude, slab.elastic);
        src.length_km = geom.length_km;
        src.width_km = geom.width_km;
        src.slip_m = geom.slip_m;
        src.t0_days = uniform(rng, slab.t0_min_days, slab.t0_max_days);
        src.duration_days = uniform(rng, slab.duration_min_days, slab.duration_max_days);
        out.push_back(src);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

struct WindowSample {
    SeriesBlock noise;
    SeriesBlock clean;
    SeriesBlock observed;  // noise + clean; gaps hold kGapSentinel
    GapMask mask;
    std::vector<DislocationSource> sources;

    std::size_t stations() const { return clean.stations; }
    std::size_t days() const { return clean.days; }
};

struct GeneratorConfig {
    SlabConfig slab;
    double gamma = 0.01;
    std::size_t window_days = kWindowDays;
};

/// Sum of every source's logistic ramp at the network stations.
inline SeriesBlock clean_signal(const std::vector<DislocationSource>& sources,
                                const StationNetwork& network, std::size_t days, double gamma,
                                const ElasticScaling& elastic = {})
{
    SeriesBlock d(network.size(), days);
    for (const auto& src : sources) {
        auto field = okada_displacement(src, network, elastic);
        auto ramp = logistic_ramp(field, src.t0_days, src.duration_days, gamma, days);
        for (std::size_t i = 0; i < d.size(); ++i) d.values[i] += ramp.values[i];
    }
    return d;
}

inline WindowSample assemble_window(SeriesBlock noise, std::vector<DislocationSource> sources,
                                    const StationNetwork& network, const NoiseModel& model,
                                    Rng& rng, double gamma = 0.01, const ElasticScaling& elastic = {})
{
    if (noise.stations != network.size() || model.stations != network.size())
        throw std::invalid_argument("assemble_window: station counts differ between noise, network and model");
    WindowSample w;
    w.clean = clean_signal(sources, network, noise.days, gamma, elastic);
    w.noise = std::move(noise);
    w.sources = std::move(sources);
    w.mask = sample_gap_mask(model, w.noise.days, rng);
    w.observed = w.noise;
    for (std::size_t s = 0; s < w.observed.stations; ++s)
        for (std::size_t t = 0; t < w.observed.days; ++t)
            for (std::size_t c = 0; c < w.observed.comps; ++c)
                w.observed(s, t, c) = w.mask(s, t) ? kGapSentinel : w.noise(s, t, c) + w.clean(s, t, c);
    return w;
}

/// Sample `index` of a dataset seeded with `seed`. Each sample owns its own
/// generator stream, so samples can be produced in any order.
inline WindowSample generate_sample(std::uint64_t seed, std::uint64_t index,
                                    const StationNetwork& network, const NoiseModel& model,
                                    const GeneratorConfig& cfg)
{
    Rng rng = make_stream(seed, {index});
    auto sources = sample_sources(cfg.slab, rng);
    auto noise = sample_noise(model, cfg.window_days, rng);
    return assemble_window(std::move(noise), std::move(sources), network, model, rng, cfg.gamma,
                           cfg.slab.elastic);
}

}  // namespace ssed
