// mfseg: data generation, training, evaluation, property suites, latency bench.
//
// Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 property failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mfseg/bench.hpp"
#include "mfseg/pipeline.hpp"
#include "mfseg/props.hpp"

namespace fs = std::filesystem;
using namespace mfseg;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kPropFailure = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("MFSEG_SEED");
    if (!s || !*s) return std::nullopt;
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != std::string(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw UsageError(std::string("MFSEG_SEED is not an unsigned integer: ") + s);
    }
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

TrainConfig load_config(const std::string& profile, const std::string& path) {
    TrainConfig cfg = profile == "desk" ? desk_profile() : TrainConfig{};
    if (!path.empty()) {
        nlohmann::json j = read_json(path);
        nlohmann::json base = cfg;
        base.merge_patch(j);
        try {
            cfg = base.get<TrainConfig>();
        } catch (const std::exception& e) {
            throw UsageError(path + ": " + e.what());
        }
    }
    if (const auto s = env_seed()) cfg.seed = *s;
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

std::vector<io::Sequence> load_data(const std::string& dir) { return io::read_dataset(dir); }

// --------------------------------------------------------------------------

int cmd_gen_data(const std::string& spec_path, const std::string& out) {
    synth::DatasetSpec spec = default_train_spec();
    if (!spec_path.empty()) {
        try {
            spec = read_json(spec_path).get<synth::DatasetSpec>();
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(spec_path + ": " + e.what());
        } catch (const std::invalid_argument& e) {
            throw UsageError(spec_path + ": " + e.what());
        }
    }
    if (const auto s = env_seed()) spec.first_seed = *s;
    for (std::size_t i = 0; i < spec.sequences; ++i)
        io::write_sequence(make_sequence(spec.sequence(i)), fs::path(out) / io::sequence_dirname(i));
    write_text(fs::path(out) / "dataset_spec.json", nlohmann::json(spec).dump(2) + "\n");
    std::cerr << "wrote " << spec.sequences << " sequences to " << out << "\n";
    return kOk;
}

int cmd_train(const std::string& data_dir, const TrainConfig& cfg, const std::string& stage, const std::string& init,
              const std::string& out, const std::string& log_path) {
    const auto data = load_data(data_dir);
    std::ofstream log;
    TrainHooks hooks;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw DataError("cannot write " + log_path);
        hooks.jsonl = &log;
    }
    hooks.on_epoch = [](const EpochRecord& r) { std::cerr << to_json(r).dump() << "\n"; };

    Checkpoint ck;
    ck.config = cfg;
    if (stage == "2") {
        if (init.empty()) throw UsageError("train --stage 2 needs --init <stage-1 checkpoint>");
        const Checkpoint prev = load(init);
        ck.params = train_stage2(data, cfg, prev.params, hooks);
        ck.stage = 2;
    } else {
        ck.params = train_stage1(data, cfg, hooks);
        ck.stage = 1;
        if (stage == "all" && cfg.max_frames > 1) {
            ck.params = train_stage2(data, cfg, std::move(ck.params), hooks);
            ck.stage = 2;
        }
    }
    save(ck, out);
    std::cerr << "saved stage-" << ck.stage << " checkpoint to " << out << "\n";
    return kOk;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt, const std::string& mode_name_arg,
             const std::string& report) {
    const auto data = load_data(data_dir);
    const Checkpoint ck = load(ckpt);
    FusionMode mode = natural_mode(ck);
    if (!mode_name_arg.empty()) mode = *parse_mode(mode_name_arg);
    const EvalReport r = evaluate(data, ck.params, ck.config, mode);
    const std::vector<std::string> names =
        data.empty() || data.front().class_names.empty() ? std::vector<std::string>{} : data.front().class_names;
    nlohmann::json j = to_json(r, names);
    j["mode"] = mfseg::mode_name(mode);
    j["stage"] = ck.stage;
    if (report.empty())
        std::cout << j.dump(2) << "\n";
    else
        write_text(report, j.dump(2) + "\n");
    std::cerr << "mIoU " << r.miou << " (" << mfseg::mode_name(mode) << ", " << r.points << " points)\n";
    return kOk;
}

int cmd_bench(const std::string& data_dir, const std::string& ckpt, const TrainConfig& fallback,
              bench::BenchConfig bc, const std::string& out) {
    const auto data = load_data(data_dir);
    const auto it = std::find_if(data.begin(), data.end(),
                                 [&](const io::Sequence& s) { return s.frames.size() >= bc.max_frames; });
    if (it == data.end())
        throw DataError("no sequence in " + data_dir + " has " + std::to_string(bc.max_frames) + " frames");
    Checkpoint ck;
    if (!ckpt.empty() && fs::exists(ckpt)) {
        ck = load(ckpt);
    } else {
        std::cerr << "warning: checkpoint " << (ckpt.empty() ? "(none)" : "'" + ckpt + "'")
                  << " not found, benchmarking seeded random parameters\n";
        ck.config = fallback;
        ck.params = init_model(fallback.model(), fallback.seed);
    }
    init_aggregator(ck.params, ck.config.model(), ck.config.seed);
    const bench::LatencyReport rep = bench::run(it->frames, ck.params, ck.config.model(), bc);

    fs::path base(out);
    if (base.extension() == ".json" || base.extension() == ".csv") base.replace_extension();
    fs::path json_path = base, csv_path = base;
    json_path += ".json";
    csv_path += ".csv";
    nlohmann::json j = bench::to_json(rep);
    j["component_sum_max_relative_gap"] = bench::worst_accounting_gap(rep);
    write_text(json_path, j.dump(2) + "\n");
    std::ostringstream csv;
    bench::write_csv(rep, csv);
    write_text(csv_path, csv.str());
    std::cerr << "slope ms/frame: streaming " << rep.streaming_slope << ", concatenation " << rep.concatenation_slope
              << " (ratio " << rep.slope_ratio() << ")\n";
    return kOk;
}

int cmd_props(std::uint64_t seed, const std::string& out, bool timing, bool mutant) {
    props::SuiteOptions o;
    o.seed = seed;
    // Runs the suites against an aggregator that applies h in one order only; they must fail.
    if (mutant) o.pair = props::broken_symmetrization;
    const props::PropsReport rep = props::run_all(o);
    for (const auto& r : rep.results)
        std::cerr << (r.pass ? "PASS " : "FAIL ") << r.suite << "/" << r.name << ": " << r.detail << "\n";
    const std::string text = rep.to_json(timing).dump(2) + "\n";
    if (out.empty())
        std::cout << text;
    else
        write_text(out, text);
    return rep.all_pass() ? kOk : kPropFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-frame LiDAR semantic segmentation with feature aggregation"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic sequence dataset");
    gen->add_option("--spec", spec_path, "Dataset or scene spec JSON (default: 200 x 5-frame training set)");
    gen->add_option("--out", out_dir, "Output directory")->required();

    std::string data_dir, config_path, stage = "all", init, ckpt_out, log_path, profile = "full";
    auto* train = app.add_subcommand("train", "Train stage 1, stage 2 or both");
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--config", config_path, "Training config JSON, overlaid on --profile");
    train->add_option("--profile", profile, "Base config")->check(CLI::IsMember({"full", "desk"}));
    train->add_option("--stage", stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
    train->add_option("--init", init, "Stage-1 checkpoint (required for --stage 2)");
    train->add_option("--out", ckpt_out, "Checkpoint path")->required();
    train->add_option("--log", log_path, "JSONL file with one record per epoch");

    std::string ckpt, report, mode;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the current frame of each sequence");
    eval->add_option("--data", data_dir, "Dataset directory")->required();
    eval->add_option("--ckpt", ckpt, "Checkpoint path")->required();
    eval->add_option("--report", report, "Output JSON (default: stdout)");
    eval->add_option("--mode", mode, "single, concatenation or aggregation (default: from checkpoint)")
        ->check(CLI::IsMember({"single", "concatenation", "aggregation"}));

    bench::BenchConfig bc;
    std::string bench_out = "bench_report";
    auto* bench_cmd = app.add_subcommand("bench", "Streaming vs concatenation latency over frame counts");
    bench_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    bench_cmd->add_option("--ckpt", ckpt, "Checkpoint (missing: seeded parameters)");
    bench_cmd->add_option("--config", config_path, "Config for the seeded fallback");
    bench_cmd->add_option("--profile", profile, "Base config for the seeded fallback")
        ->check(CLI::IsMember({"full", "desk"}));
    bench_cmd->add_option("--max-frames", bc.max_frames, "Largest frame count")->check(CLI::Range(2, 1000));
    bench_cmd->add_option("--repeats", bc.repeats, "Timed runs per point")->check(CLI::Range(5, 1000));
    bench_cmd->add_option("--warmups", bc.warmups, "Untimed runs per point");
    bench_cmd->add_option("--queries", bc.max_queries, "Current-frame points decoded per step (0: all)");
    bench_cmd->add_option("--out", bench_out, "Report path; writes <out>.json and <out>.csv");

    std::uint64_t props_seed = 0;
    std::string props_out;
    bool props_timing = false, props_mutant = false;
    auto* props_cmd = app.add_subcommand("props", "Run the property suites");
    props_cmd->add_option("--seed", props_seed, "Suite seed (MFSEG_SEED overrides)");
    props_cmd->add_option("--out", props_out, "Report JSON (default: stdout)");
    props_cmd->add_flag("--timing", props_timing, "Include per-suite wall time in the report");
    props_cmd->add_flag("--mutant", props_mutant, "Check against a deliberately asymmetric aggregator");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(spec_path, out_dir);
        if (*train) return cmd_train(data_dir, load_config(profile, config_path), stage, init, ckpt_out, log_path);
        if (*eval) return cmd_eval(data_dir, ckpt, mode, report);
        if (*bench_cmd) return cmd_bench(data_dir, ckpt, load_config(profile, config_path), bc, bench_out);
        if (*props_cmd) return cmd_props(env_seed().value_or(props_seed), props_out, props_timing, props_mutant);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const io::SequenceError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const CheckpointError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
