// Command-line front end: dataset generation, training, evaluation, moving
// baselines, sliding-window denoising of station files and graph export.
// Progress is written to stdout as one JSON object per line.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ssed/ssed.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void emit(const json& j) { std::cout << j.dump() << std::endl; }

// Training allocates and frees the same large buffers every batch; keeping
// them on the heap avoids repeated page faults.
void tune_allocator()
{
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

std::vector<std::size_t> split_indices(const ssed::Dataset& ds, const std::string& name)
{
    if (name == "train") return ds.manifest.train;
    if (name == "val") return ds.manifest.val;
    if (name == "test") return ds.manifest.test;
    throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

std::vector<double> parse_edges(const std::string& text)
{
    std::vector<double> e;
    if (text.empty()) return e;
    for (const auto& f : ssed::split_fields(text)) e.push_back(ssed::parse_double(f));
    return e;
}

void write_report(const ssed::MetricsReport& r, const std::string& out, const std::string& curve)
{
    const fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << ssed::report_json(r).dump(1) << '\n';
    const fs::path c = curve.empty() ? p.parent_path() / (p.stem().string() + "_snr.csv") : fs::path(curve);
    ssed::write_snr_curve(r.binning, c.string());
    auto j = ssed::report_json(r);
    j.erase("snr_bins");
    j["report"] = out;
    j["curve"] = c.string();
    emit(j);
}

}  // namespace

int main(int argc, char** argv)
{
    tune_allocator();
    CLI::App app{"Multi-station GNSS displacement denoiser"};
    app.require_subcommand(1);

    // generate --------------------------------------------------------------
    ssed::DatasetSpec spec;
    std::string gen_out;
    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--samples", spec.samples, "Number of 60-day windows")->capture_default_str();
    gen->add_option("--stations", spec.stations, "Synthetic network size (ignored with --station-file)")
        ->capture_default_str();
    gen->add_option("--seed", spec.seed, "Master seed")->capture_default_str();
    gen->add_option("--span-days", spec.span_days, "Length of built-in residual series")->capture_default_str();
    gen->add_option("--residuals", spec.residual_dir, "Directory of <id>.csv residual series");
    gen->add_option("--station-file", spec.station_file, "Station file (id,lat,lon)");
    gen->add_option("--gamma", spec.generator.gamma, "Logistic end-point tolerance")->capture_default_str();

    // train -----------------------------------------------------------------
    std::string tr_dataset, tr_config, tr_out, tr_ablation;
    std::uint64_t tr_seed = 0;
    auto* tr = app.add_subcommand("train", "Train a model on a dataset");
    tr->add_option("--dataset", tr_dataset, "Dataset directory")->required();
    tr->add_option("--config", tr_config, "Flat key = value config file");
    tr->add_option("--out", tr_out, "Checkpoint directory")->required();
    tr->add_option("--ablation", tr_ablation, "full, no_transformer, spatial_attention_only, temporal_attention_only");
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "Training seed (overrides the config)");

    // evaluate --------------------------------------------------------------
    std::string ev_ckpt, ev_dataset, ev_out, ev_split = "test", ev_curve, ev_edges;
    double ev_floor = ssed::kRecordFloorMm;
    auto* ev = app.add_subcommand("evaluate", "Metrics of a checkpoint on a dataset split");
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint directory")->required();
    ev->add_option("--dataset", ev_dataset, "Dataset directory")->required();
    ev->add_option("--out", ev_out, "Report JSON path")->required();
    ev->add_option("--split", ev_split, "train, val or test")->capture_default_str();
    ev->add_option("--curve", ev_curve, "SNR curve CSV (default: <out stem>_snr.csv)");
    ev->add_option("--snr-edges", ev_edges, "Comma-separated SNR bin edges in dB");
    ev->add_option("--record-floor", ev_floor, "Peak displacement (mm) for a recording station")
        ->capture_default_str();

    // baseline --------------------------------------------------------------
    std::string bl_kind = "median", bl_dataset, bl_out, bl_split = "test", bl_curve, bl_edges;
    std::size_t bl_k = 15;
    double bl_floor = ssed::kRecordFloorMm;
    auto* bl = app.add_subcommand("baseline", "Metrics of a moving mean/median filter");
    bl->add_option("--kind", bl_kind, "mean or median")->capture_default_str();
    bl->add_option("--k", bl_k, "Odd kernel size")->capture_default_str();
    bl->add_option("--dataset", bl_dataset, "Dataset directory")->required();
    bl->add_option("--out", bl_out, "Report JSON path")->required();
    bl->add_option("--split", bl_split, "train, val or test")->capture_default_str();
    bl->add_option("--curve", bl_curve, "SNR curve CSV (default: <out stem>_snr.csv)");
    bl->add_option("--snr-edges", bl_edges, "Comma-separated SNR bin edges in dB");
    bl->add_option("--record-floor", bl_floor, "Peak displacement (mm) for a recording station")
        ->capture_default_str();

    // denoise ---------------------------------------------------------------
    std::string dn_ckpt, dn_series, dn_stations, dn_out;
    std::size_t dn_stride = 1;
    double dn_display = 0.01, dn_edge = 0.008;
    auto* dn = app.add_subcommand("denoise", "Sliding-window denoising of station files into daily rates");
    dn->add_option("--checkpoint", dn_ckpt, "Checkpoint directory")->required();
    dn->add_option("--series", dn_series, "Directory of <id>.csv series")->required();
    dn->add_option("--stations", dn_stations, "Station file (id,lat,lon)")->required();
    dn->add_option("--out", dn_out, "Output directory")->required();
    dn->add_option("--stride", dn_stride, "Window stride in days")->capture_default_str();
    dn->add_option("--display-threshold", dn_display, "Smallest |rate| (mm/day) kept in display files")
        ->capture_default_str();
    dn->add_option("--edge-threshold", dn_edge, "Adjacency weight for edges.csv")->capture_default_str();

    // graph-export ----------------------------------------------------------
    std::string gx_ckpt, gx_out;
    double gx_threshold = 0.008;
    auto* gx = app.add_subcommand("graph-export", "Adjacency edge list and diagonal of a checkpoint");
    gx->add_option("--checkpoint", gx_ckpt, "Checkpoint directory")->required();
    gx->add_option("--threshold", gx_threshold, "Edge weight threshold")->capture_default_str();
    gx->add_option("--out", gx_out, "Edge list CSV; the diagonal goes to <stem>_diagonal.csv")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto ds = ssed::generate_dataset(spec);
            ssed::write_dataset(ds, gen_out);
            emit({{"event", "generated"},
                  {"out", gen_out},
                  {"samples", ds.manifest.samples},
                  {"stations", ds.manifest.stations},
                  {"train", ds.manifest.train.size()},
                  {"val", ds.manifest.val.size()},
                  {"test", ds.manifest.test.size()},
                  {"noise_std", ds.manifest.noise_std},
                  {"config_digest", ds.manifest.config_digest}});
        } else if (tr->parsed()) {
            ssed::ModelConfig mc;
            ssed::TrainConfig tc;
            if (!tr_config.empty()) ssed::apply_config(ssed::read_key_values(tr_config), mc, tc);
            if (!tr_ablation.empty()) mc.ablation = ssed::parse_ablation(tr_ablation);
            if (*tr_seed_opt) tc.seed = tr_seed;
            auto ds = ssed::read_dataset(tr_dataset);
            mc.stations = ds.manifest.stations;
            emit({{"event", "train_start"},
                  {"dataset", tr_dataset},
                  {"model", ssed::config_json(mc)},
                  {"batch_size", tc.batch_size},
                  {"learning_rate", tc.learning_rate},
                  {"lr_decay", tc.lr_decay},
                  {"max_epochs", tc.max_epochs},
                  {"patience", tc.patience},
                  {"seed", tc.seed}});
            auto result = ssed::train(ds, mc, tc, [](const ssed::EpochRecord& r) {
                auto j = ssed::epoch_json(r);
                j["event"] = "epoch";
                emit(j);
            });
            ssed::save_checkpoint(result.best, tr_out);
            ssed::write_train_log(result.log, (fs::path(tr_out) / "train_log.jsonl").string());
            emit({{"event", "train_done"},
                  {"checkpoint", tr_out},
                  {"best_epoch", result.log.best_epoch},
                  {"best_val_mse", result.log.best_val_mse},
                  {"epoch0_val_mse", result.log.epochs.front().val_mse},
                  {"wall_seconds", result.log.wall_seconds}});
        } else if (ev->parsed()) {
            auto ck = ssed::load_checkpoint(ev_ckpt);
            auto ds = ssed::read_dataset(ev_dataset);
            auto idx = split_indices(ds, ev_split);
            auto r = ssed::evaluate_predictions(ds, idx, ssed::model_predictions(ck, ds, idx),
                                                ssed::ablation_name(ck.config.ablation), parse_edges(ev_edges),
                                                ev_floor);
            write_report(r, ev_out, ev_curve);
        } else if (bl->parsed()) {
            const auto kind = ssed::parse_filter_kind(bl_kind);
            auto ds = ssed::read_dataset(bl_dataset);
            auto idx = split_indices(ds, bl_split);
            const std::string name = std::string(kind == ssed::FilterKind::mean ? "moving_mean_" : "moving_med_") +
                                     std::to_string(bl_k);
            auto r = ssed::evaluate_predictions(ds, idx, ssed::baseline_predictions(ds, idx, kind, bl_k), name,
                                                parse_edges(bl_edges), bl_floor);
            write_report(r, bl_out, bl_curve);
        } else if (dn->parsed()) {
            auto ck = ssed::load_checkpoint(dn_ckpt);
            auto series = ssed::ingest(dn_series, dn_stations);
            if (series.network.size() != ck.config.stations)
                throw std::runtime_error("checkpoint expects " + std::to_string(ck.config.stations) +
                                         " stations, station file lists " + std::to_string(series.network.size()));
            if (!ck.stations.empty() && ck.stations != ssed::station_ids(series.network))
                throw std::runtime_error("station file order differs from the checkpoint's station list");
            emit({{"event", "denoise_start"},
                  {"stations", series.network.size()},
                  {"days", series.days()},
                  {"first_date", ssed::format_date(series.start)},
                  {"windows", ssed::window_count(series.days(), ssed::kWindowDays, dn_stride)}});
            auto rates = ssed::denoise_rates(series, ssed::checkpoint_denoiser(ck), dn_stride);
            auto report = ssed::adjacency_report(ck.params.E, dn_edge);
            auto paths = ssed::emit_outputs(rates, &report, dn_display, dn_out);
            emit({{"event", "denoise_done"},
                  {"out", dn_out},
                  {"rates_east", paths.rates_east.string()},
                  {"rates_north", paths.rates_north.string()},
                  {"strong_edges", report.strong_edges.size()}});
        } else if (gx->parsed()) {
            auto ck = ssed::load_checkpoint(gx_ckpt);
            auto report = ssed::adjacency_report(ck.params.E, gx_threshold);
            std::vector<std::string> ids = ck.stations;
            if (ids.empty())
                for (std::size_t i = 0; i < ck.config.stations; ++i) ids.push_back(std::to_string(i));
            const fs::path out(gx_out);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            const fs::path diag = out.parent_path() / (out.stem().string() + "_diagonal.csv");
            ssed::write_edges(report, ids, out.string());
            ssed::write_diagonal(report, ids, diag.string());
            emit({{"event", "graph_exported"},
                  {"edges", out.string()},
                  {"diagonal", diag.string()},
                  {"strong_edges", report.strong_edges.size()},
                  {"potential_edges", report.potential_edges()},
                  {"threshold", gx_threshold}});
        }
    } catch (const std::exception& e) {
        std::cerr << json{{"event", "error"}, {"message", e.what()}}.dump() << std::endl;
        return EXIT_FAILURE;
    }
    return EXIT_SUCCESS;
}
