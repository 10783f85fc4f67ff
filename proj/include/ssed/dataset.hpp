#pragma once

// Dataset generation and the on-disk layout:
//   manifest.json                 counts, shapes, seed, config digest, splits
//   noise.bin clean.bin observed.bin  float32 LE [samples, stations, days, 2]
//   mask.bin                      uint8 [samples, stations, days]
//   sources.csv                   one row per dislocation

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssed/csv.hpp"
#include "ssed/series_io.hpp"
#include "ssed/synthgen.hpp"

namespace ssed {

static_assert(std::endian::native == std::endian::little, "dataset blobs assume a little-endian host");

enum class Split { train, val, test };

inline const char* split_name(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

struct DatasetManifest {
    std::size_t samples = 0;
    std::size_t stations = 0;
    std::size_t window_days = kWindowDays;
    std::size_t components = kComponents;
    std::uint64_t seed = 0;
    std::string config_digest;
    double noise_std = 1.0;  // std of the training-split noise, mm
    std::vector<std::size_t> train, val, test;
    std::vector<int> event_counts;

    const std::vector<std::size_t>& indices(Split s) const
    {
        return s == Split::train ? train : s == Split::val ? val : test;
    }
};

struct Dataset {
    DatasetManifest manifest;
    StationNetwork network;
    std::vector<WindowSample> samples;
};

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view text)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Seeded shuffle into floor(0.8 n) training, floor(0.1 n) validation and
/// the remainder as test samples.
inline void assign_splits(DatasetManifest& m)
{
    std::vector<std::size_t> order(m.samples);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_stream(m.seed, {0x5b117});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_train = m.samples * 8 / 10, n_val = m.samples / 10;
    m.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    m.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    m.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    for (auto* v : {&m.train, &m.val, &m.test}) std::sort(v->begin(), v->end());
}

struct DatasetSpec {
    std::size_t samples = 4000;
    std::size_t stations = 20;
    std::uint64_t seed = 1;
    std::size_t span_days = 2000;   // fallback residual span
    std::string residual_dir;       // empty: built-in fallback residuals
    std::string station_file;       // empty: synthetic network
    GeneratorConfig generator;
    FallbackNoiseConfig fallback;
};

inline std::string describe(const DatasetSpec& s)
{
    const auto& g = s.generator;
    const auto& sl = g.slab;
    std::ostringstream o;
    o.precision(17);
    o << "samples=" << s.samples << ";stations=" << s.stations << ";span=" << s.span_days
      << ";residuals=" << s.residual_dir << ";station_file=" << s.station_file << ";gamma=" << g.gamma
      << ";window=" << g.window_days << ";trench=" << sl.trench.lat << ',' << sl.trench.lon
      << ";strike=" << sl.strike_deg << ";dip=" << sl.dip_deg << ";depth=" << sl.depth_min_km << ','
      << sl.depth_max_km << ',' << sl.depth_jitter_km << ";half_length=" << sl.half_length_km
      << ";mw=" << sl.magnitude_min << ',' << sl.magnitude_max << ";rake=" << sl.rake_min_deg << ','
      << sl.rake_max_deg << ";t0=" << sl.t0_min_days << ',' << sl.t0_max_days
      << ";duration=" << sl.duration_min_days << ',' << sl.duration_max_days
      << ";shear=" << sl.elastic.shear_modulus_pa << ";poisson=" << sl.elastic.poisson
      << ";moment=" << sl.elastic.moment_slope << ',' << sl.elastic.moment_offset
      << ";fallback=" << s.fallback.spectral_index << ',' << s.fallback.correlation_km << ','
      << s.fallback.sigma_mm << ',' << s.fallback.gap_start_probability << ',' << s.fallback.mean_gap_days;
    return o.str();
}

/// Everything needed before drawing samples: network and fitted noise model.
struct GeneratorState {
    StationNetwork network;
    NoiseModel model;
};

inline GeneratorState prepare_generator(const DatasetSpec& spec)
{
    GeneratorState g;
    g.network = spec.station_file.empty() ? synthetic_network(spec.stations, spec.seed)
                                          : read_stations(spec.station_file);
    SeriesBlock residuals;
    if (spec.residual_dir.empty()) {
        Rng rng = make_stream(spec.seed, {0xfa11bac4});
        FallbackNoiseConfig fb = spec.fallback;
        fb.span_days = spec.span_days;
        residuals = synthetic_residuals(g.network, fb, rng);
    } else {
        residuals = load_series_dir(spec.residual_dir, g.network).data;
    }
    g.model = fit_noise_model(residuals);
    return g;
}

inline Dataset generate_dataset(const DatasetSpec& spec)
{
    auto state = prepare_generator(spec);
    Dataset ds;
    ds.network = state.network;
    auto& m = ds.manifest;
    m.samples = spec.samples;
    m.stations = state.network.size();
    m.window_days = spec.generator.window_days;
    m.seed = spec.seed;
    m.config_digest = fnv1a_hex(describe(spec));
    ds.samples.reserve(spec.samples);
    for (std::size_t i = 0; i < spec.samples; ++i) {
        ds.samples.push_back(generate_sample(spec.seed, i, state.network, state.model, spec.generator));
        m.event_counts.push_back(static_cast<int>(ds.samples.back().sources.size()));
    }
    assign_splits(m);
    double ss = 0;
    std::size_t n = 0;
    for (auto i : m.train)
        for (double v : ds.samples[i].noise.values) {
            ss += v * v;
            ++n;
        }
    m.noise_std = n > 0 && ss > 0 ? std::sqrt(ss / static_cast<double>(n)) : 1.0;
    return ds;
}

// ---------------------------------------------------------------------------
// Storage
// ---------------------------------------------------------------------------

namespace dataset_detail {

inline void write_floats(std::ofstream& out, const std::vector<double>& v)
{
    std::vector<float> buf(v.begin(), v.end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline void read_floats(std::ifstream& in, std::vector<double>& v, const std::string& file, std::size_t sample)
{
    std::vector<float> buf(v.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
        throw std::runtime_error(file + ": truncated at sample " + std::to_string(sample));
    std::copy(buf.begin(), buf.end(), v.begin());
}

inline std::ifstream open_blob(const std::filesystem::path& p, std::size_t expected_bytes)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    const auto size = std::filesystem::file_size(p);
    if (size > expected_bytes)
        throw std::runtime_error(p.string() + ": " + std::to_string(size - expected_bytes) +
                                 " bytes beyond the manifest shape");
    return in;
}

}  // namespace dataset_detail

inline nlohmann::json manifest_json(const DatasetManifest& m, const StationNetwork& net)
{
    nlohmann::json j;
    j["samples"] = m.samples;
    j["stations"] = m.stations;
    j["window_days"] = m.window_days;
    j["components"] = m.components;
    j["seed"] = m.seed;
    j["config_digest"] = m.config_digest;
    j["noise_std"] = m.noise_std;
    j["splits"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
    j["event_counts"] = m.event_counts;
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : net.stations) st.push_back({{"id", s.id}, {"lat", s.lat}, {"lon", s.lon}});
    j["station_list"] = st;
    const std::vector<std::size_t> shape{m.samples, m.stations, m.window_days, m.components};
    j["arrays"] = {{"noise.bin", {{"dtype", "float32"}, {"shape", shape}}},
                   {"clean.bin", {{"dtype", "float32"}, {"shape", shape}}},
                   {"observed.bin", {{"dtype", "float32"}, {"shape", shape}}},
                   {"mask.bin", {{"dtype", "uint8"}, {"shape", {m.samples, m.stations, m.window_days}}}}};
    return j;
}

inline void write_dataset(const Dataset& ds, const std::string& directory)
{
    namespace fs = std::filesystem;
    const auto& m = ds.manifest;
    if (ds.samples.size() != m.samples)
        throw std::invalid_argument("write_dataset: manifest lists " + std::to_string(m.samples) +
                                    " samples, got " + std::to_string(ds.samples.size()));
    if (m.train.size() + m.val.size() + m.test.size() != m.samples)
        throw std::invalid_argument("write_dataset: splits do not partition the samples");
    fs::create_directories(directory);
    const fs::path dir(directory);
    {
        std::ofstream out(dir / "manifest.json");
        if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
        out << manifest_json(m, ds.network).dump(1) << '\n';
    }
    std::ofstream noise(dir / "noise.bin", std::ios::binary), clean(dir / "clean.bin", std::ios::binary),
        observed(dir / "observed.bin", std::ios::binary), mask(dir / "mask.bin", std::ios::binary);
    std::ofstream sources(dir / "sources.csv");
    if (!noise || !clean || !observed || !mask || !sources)
        throw std::runtime_error("cannot write dataset blobs in " + directory);
    sources << "sample,lat,lon,depth_km,strike_deg,dip_deg,rake_deg,length_km,width_km,slip_m,magnitude,"
               "t0_days,duration_days\n";
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        if (s.stations() != m.stations || s.days() != m.window_days || !s.noise.same_shape(s.clean) ||
            !s.noise.same_shape(s.observed))
            throw std::invalid_argument("write_dataset: sample " + std::to_string(i) + " shape differs from manifest");
        dataset_detail::write_floats(noise, s.noise.values);
        dataset_detail::write_floats(clean, s.clean.values);
        dataset_detail::write_floats(observed, s.observed.values);
        mask.write(reinterpret_cast<const char*>(s.mask.flags.data()), static_cast<std::streamsize>(s.mask.flags.size()));
        for (const auto& src : s.sources) {
            sources << i;
            for (double v : {src.lat, src.lon, src.depth_km, src.strike_deg, src.dip_deg, src.rake_deg,
                             src.length_km, src.width_km, src.slip_m, src.magnitude, src.t0_days,
                             src.duration_days})
                sources << ',' << format_value(v);
            sources << '\n';
        }
    }
}

inline DatasetManifest read_manifest(const std::string& directory, StationNetwork* network = nullptr)
{
    const auto path = (std::filesystem::path(directory) / "manifest.json").string();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
        DatasetManifest m;
        m.samples = j.at("samples").get<std::size_t>();
        m.stations = j.at("stations").get<std::size_t>();
        m.window_days = j.at("window_days").get<std::size_t>();
        m.components = j.at("components").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config_digest = j.at("config_digest").get<std::string>();
        m.noise_std = j.at("noise_std").get<double>();
        m.train = j.at("splits").at("train").get<std::vector<std::size_t>>();
        m.val = j.at("splits").at("val").get<std::vector<std::size_t>>();
        m.test = j.at("splits").at("test").get<std::vector<std::size_t>>();
        m.event_counts = j.at("event_counts").get<std::vector<int>>();
        if (m.components != kComponents) throw std::runtime_error("components must be 2");
        if (m.train.size() + m.val.size() + m.test.size() != m.samples)
            throw std::runtime_error("split counts do not sum to the sample count");
        if (m.event_counts.size() != m.samples) throw std::runtime_error("event_counts length differs from samples");
        if (network) {
            network->stations.clear();
            for (const auto& s : j.at("station_list"))
                network->stations.push_back(
                    {s.at("id").get<std::string>(), s.at("lat").get<double>(), s.at("lon").get<double>()});
            if (network->size() != m.stations) throw std::runtime_error("station_list length differs from stations");
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

inline Dataset read_dataset(const std::string& directory)
{
    namespace fs = std::filesystem;
    Dataset ds;
    ds.manifest = read_manifest(directory, &ds.network);
    const auto& m = ds.manifest;
    const fs::path dir(directory);
    const std::size_t per = m.stations * m.window_days * m.components;
    const std::size_t per_mask = m.stations * m.window_days;
    auto noise = dataset_detail::open_blob(dir / "noise.bin", m.samples * per * sizeof(float));
    auto clean = dataset_detail::open_blob(dir / "clean.bin", m.samples * per * sizeof(float));
    auto observed = dataset_detail::open_blob(dir / "observed.bin", m.samples * per * sizeof(float));
    auto mask = dataset_detail::open_blob(dir / "mask.bin", m.samples * per_mask);
    ds.samples.resize(m.samples);
    for (std::size_t i = 0; i < m.samples; ++i) {
        auto& s = ds.samples[i];
        s.noise = SeriesBlock(m.stations, m.window_days);
        s.clean = SeriesBlock(m.stations, m.window_days);
        s.observed = SeriesBlock(m.stations, m.window_days);
        s.mask = GapMask(m.stations, m.window_days);
        dataset_detail::read_floats(noise, s.noise.values, (dir / "noise.bin").string(), i);
        dataset_detail::read_floats(clean, s.clean.values, (dir / "clean.bin").string(), i);
        dataset_detail::read_floats(observed, s.observed.values, (dir / "observed.bin").string(), i);
        mask.read(reinterpret_cast<char*>(s.mask.flags.data()), static_cast<std::streamsize>(per_mask));
        if (static_cast<std::size_t>(mask.gcount()) != per_mask)
            throw std::runtime_error((dir / "mask.bin").string() + ": truncated at sample " + std::to_string(i));
    }
    const auto src_path = (dir / "sources.csv").string();
    auto table = read_csv(src_path);
    for (const auto& row : table.rows) {
        if (row.size() != 13) throw std::runtime_error(src_path + ": expected 13 fields per row");
        const auto idx = static_cast<std::size_t>(parse_double(row[0]));
        if (idx >= m.samples) throw std::runtime_error(src_path + ": sample index " + row[0] + " out of range");
        DislocationSource s;
        double* fields[] = {&s.lat, &s.lon, &s.depth_km, &s.strike_deg, &s.dip_deg, &s.rake_deg,
                            &s.length_km, &s.width_km, &s.slip_m, &s.magnitude, &s.t0_days, &s.duration_days};
        for (std::size_t k = 0; k < 12; ++k) *fields[k] = parse_double(row[k + 1]);
        ds.samples[idx].sources.push_back(s);
    }
    for (std::size_t i = 0; i < m.samples; ++i)
        if (static_cast<int>(ds.samples[i].sources.size()) != m.event_counts[i])
            throw std::runtime_error(src_path + ": sample " + std::to_string(i) + " has " +
                                     std::to_string(ds.samples[i].sources.size()) + " sources, manifest lists " +
                                     std::to_string(m.event_counts[i]));
    return ds;
}

}  // namespace ssed
