#include "parco/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include "parco/gradcheck.hpp"
#include "parco/rng.hpp"

namespace parco::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stream for model initialization, far from the per-step streams.
constexpr std::uint64_t kInitStream = std::uint64_t{1} << 40;

fs::path out_dir(const CommonArgs& c) { return c.out.value_or(fs::path(".")); }

std::string indexed(const char* prefix, std::size_t i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
    return buf;
}

data::Sequence load_sequence(const fs::path& dir) {
    try {
        return data::load_sequence(dir);
    } catch (const std::exception& e) {
        throw DataError("cannot load sequence " + dir.string() + ": " + e.what());
    }
}

sdfnet::Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
    try {
        return sdfnet::load_checkpoint(path);
    } catch (const std::exception& e) {
        throw DataError("cannot load checkpoint " + path.string() + ": " + e.what());
    }
}

model::Model load_model(const sdfnet::Checkpoint& ckpt, const fs::path& path) {
    try {
        return model::from_checkpoint(ckpt);
    } catch (const std::exception& e) {
        throw DataError("invalid checkpoint " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

bool is_sequence(const fs::path& dir) { return fs::exists(dir / "sequence.json"); }

std::vector<fs::path> select(std::span<const fs::path> dirs, std::size_t holdout, bool held_out) {
    std::vector<fs::path> out;
    for (const fs::path& d : dirs) {
        if (is_sequence(d)) {
            out.push_back(d);
            continue;
        }
        const std::vector<fs::path> seqs = sequence_dirs(d);
        const std::size_t n_train = seqs.size() > holdout ? seqs.size() - holdout : 0;
        if (held_out)
            out.insert(out.end(), seqs.begin() + static_cast<std::ptrdiff_t>(n_train), seqs.end());
        else
            out.insert(out.end(), seqs.begin(), seqs.begin() + static_cast<std::ptrdiff_t>(n_train));
    }
    return out;
}

}  // namespace

config::RunConfig resolve_config(const CommonArgs& common) {
    return common.config ? config::load(*common.config) : config::RunConfig{};
}

std::size_t resolve_threads(std::optional<std::size_t> flag) {
    if (flag && *flag > 0) return *flag;
    if (const char* env = std::getenv("PARCO_SDF_THREADS")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
        throw UsageError(std::string("PARCO_SDF_THREADS must be a positive integer, got '") + env + "'");
    }
    return 1;
}

std::vector<fs::path> sequence_dirs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    if (is_sequence(dir)) return {dir};
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() && entry.path().filename().string().rfind("seq_", 0) == 0 && is_sequence(entry.path()))
            out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("no sequences found in " + dir.string());
    return out;
}

std::vector<fs::path> training_sequences(std::span<const fs::path> dirs, std::size_t holdout) {
    return select(dirs, holdout, false);
}

std::vector<fs::path> evaluation_sequences(std::span<const fs::path> dirs, std::size_t holdout) {
    return select(dirs, holdout, true);
}

// ---- gen ------------------------------------------------------------------

int cmd_gen(const GenArgs& args, std::ostream& log) {
    config::RunConfig cfg = resolve_config(args.common);
    if (args.common.seed) cfg.data.seed = *args.common.seed;
    const fs::path out = out_dir(args.common);
    config::echo(cfg, out);
    const data::GenerationConfig g = cfg.generation();
    for (std::size_t i = 0; i < cfg.data.n_sequences; ++i) {
        const fs::path dir = out / indexed("seq_", i, 3);
        data::save_sequence(dir, data::generate_sequence(g, derive_seed(cfg.data.seed, i)));
        log << "wrote " << dir.string() << " (" << g.n_frames << " frames)\n";
    }
    return kOk;
}

// ---- train ----------------------------------------------------------------

int cmd_train(const TrainArgs& args, std::ostream& log) {
    config::RunConfig cfg = resolve_config(args.common);
    if (args.common.seed) cfg.run.seed = *args.common.seed;
    if (args.steps) cfg.steps = *args.steps;
    if (args.ablate_temporal) cfg.model.encoder.window_T = 1;
    if (args.no_attention) cfg.model.use_attention = false;
    if (args.data.empty()) throw UsageError("train needs at least one --data directory");

    std::vector<data::Sequence> sequences;
    for (const fs::path& dir : training_sequences(args.data, cfg.run.holdout)) sequences.push_back(load_sequence(dir));
    if (sequences.empty()) throw UsageError("no training sequences left after holding out " + std::to_string(cfg.run.holdout));

    model::Model model;
    training::TrainState state;
    if (args.resume) {
        const sdfnet::Checkpoint ckpt = load_checkpoint(*args.resume);
        model = load_model(ckpt, *args.resume);
        if (json(model.cfg) != json(cfg.model))
            throw UsageError("model configuration of " + args.resume->string() + " differs from the resolved config");
        state = training::load_train_state(ckpt, model);
    } else {
        model = model::Model::create(cfg.model, derive_seed(cfg.run.seed, kInitStream));
    }

    const fs::path out = out_dir(args.common);
    config::echo(cfg, out);
    auto save = [&](const training::TrainState& s, const fs::path& path) {
        sdfnet::Checkpoint c = training::training_checkpoint(model, s);
        c.header["ablate_temporal"] = args.ablate_temporal;
        c.header["use_attention"] = cfg.model.use_attention;
        c.header["window_T"] = cfg.model.encoder.window_T;
        c.header["config"] = config::to_json(cfg);
        sdfnet::save_checkpoint(path, c);
    };

    std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw DataError("cannot write " + (out / "metrics.jsonl").string());
    std::ofstream timing;
    if (args.timing) {
        timing.open(out / "timing.jsonl", std::ios::binary);
        if (!timing) throw DataError("cannot write " + (out / "timing.jsonl").string());
    }
    const auto start = std::chrono::steady_clock::now();
    const std::size_t report_every = std::max<std::size_t>(1, cfg.steps / 20);

    training::LoopHooks hooks;
    hooks.log = [&](const json& rec) {
        metrics << rec.dump() << '\n';
        const std::size_t step = rec.at("step").get<std::size_t>();
        if (args.timing) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            timing << json{{"step", step}, {"elapsed_s", s}}.dump() << '\n';
        }
        if ((step + 1) % report_every == 0 || step + 1 == cfg.steps)
            log << "step " << step + 1 << "/" << cfg.steps << " loss " << data::format_double(rec.at("loss").at("total").get<double>())
                << "\n";
    };
    hooks.checkpoint = [&](const training::TrainState& s) { save(s, out / ("checkpoint_" + indexed("", s.step, 6) + ".pcsd")); };

    training::train_loop(model, state, sequences, cfg.train(), cfg.loss, hooks);
    save(state, out / "checkpoint.pcsd");
    log << "wrote " << (out / "checkpoint.pcsd").string() << "\n";
    return kOk;
}

// ---- reconstruct ----------------------------------------------------------

int cmd_reconstruct(const ReconstructArgs& args, std::ostream& log) {
    config::RunConfig cfg = resolve_config(args.common);
    if (args.common.seed) cfg.eval.augment_seed = *args.common.seed;
    const model::Model model = load_model(load_checkpoint(args.checkpoint), args.checkpoint);
    const data::Sequence seq = load_sequence(args.sequence);
    const std::size_t window = model.cfg.encoder.window_T;
    if (args.t + 1 < window || args.t >= seq.frames.size())
        throw UsageError("frame " + std::to_string(args.t) + " is outside [" + std::to_string(window - 1) + ", " +
                         std::to_string(seq.frames.size()) + ") for window " + std::to_string(window));

    const eval::EvalOptions opts = cfg.eval_options(args.common.threads);
    const std::vector<ad::Tensor> frames =
        training::build_window(seq, args.t, window, model.cfg.encoder.points_per_frame, opts.augment_seed);
    const eval::Reconstruction r = eval::reconstruct(model, frames, opts.extraction);

    const fs::path out = out_dir(args.common);
    config::echo(cfg, out);
    const fs::path mesh_path = out / ("mesh_t" + indexed("", args.t, 4) + ".obj");
    geometry::write_obj(mesh_path, r.mesh);

    const auto& v = r.field.values;
    double z2 = 0.0;
    for (double x : r.z.values()) z2 += x * x;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    double sum = 0.0;
    std::size_t negative = 0;
    for (double x : v) {
        sum += x;
        negative += x < 0.0 ? 1 : 0;
    }
    const geometry::ManifoldReport mr = geometry::manifold_check(r.mesh);
    write_json(out / "field_stats.json", {{"t", args.t},
                                          {"grid_res", opts.extraction.grid_res},
                                          {"half_extent", opts.extraction.half_extent},
                                          {"min", *lo},
                                          {"max", *hi},
                                          {"mean", sum / static_cast<double>(v.size())},
                                          {"negative_fraction", static_cast<double>(negative) / static_cast<double>(v.size())},
                                          {"vertices", r.mesh.vertices.size()},
                                          {"faces", r.mesh.faces.size()},
                                          {"genus", geometry::genus(r.mesh)},
                                          {"closed", mr.closed},
                                          {"components", mr.components},
                                          {"z_norm", std::sqrt(z2)}});
    log << "wrote " << mesh_path.string() << " (" << r.mesh.vertices.size() << " vertices, genus "
        << data::format_double(geometry::genus(r.mesh)) << ")\n";
    return kOk;
}

// ---- eval -----------------------------------------------------------------

int cmd_eval(const EvalArgs& args, std::ostream& log) {
    config::RunConfig cfg = resolve_config(args.common);
    if (args.common.seed) cfg.eval.augment_seed = *args.common.seed;
    if (args.data.empty()) throw UsageError("eval needs at least one --data directory");
    const model::Model model = load_model(load_checkpoint(args.checkpoint), args.checkpoint);
    const std::vector<fs::path> dirs = evaluation_sequences(args.data, cfg.run.holdout);
    if (dirs.empty()) throw UsageError("no evaluation sequences selected");

    const fs::path out = out_dir(args.common);
    config::echo(cfg, out);
    if (args.heatmap) fs::create_directories(out / "heatmap");
    const eval::EvalOptions opts = cfg.eval_options(args.common.threads);

    geometry::MetricsReport all;
    json per_sequence = json::array();
    for (const fs::path& dir : dirs) {
        const data::Sequence seq = load_sequence(dir);
        const std::string name = dir.filename().string();
        eval::FrameCallback on_frame;
        if (args.heatmap)
            on_frame = [&](std::size_t t, const eval::Reconstruction& r, const geometry::FrameMetrics&) {
                const std::vector<double> d =
                    geometry::nearest_distances(r.mesh.vertices, seq.frames[t].points, opts.extraction.threads);
                const std::vector<data::Point> colors = geometry::heatmap_colors(d, kHeatmapMax);
                geometry::write_obj(out / "heatmap" / (name + "_t" + indexed("", t, 4) + ".obj"), r.mesh, &colors);
            };
        const geometry::MetricsReport rep = eval::evaluate_sequence(model, seq, opts, on_frame);
        per_sequence.push_back({{"name", name}, {"n_frames", rep.frames.size()}, {"mean_cd", rep.mean_cd},
                                {"std_cd", rep.std_cd}, {"tsr", rep.tsr}});
        all.frames.insert(all.frames.end(), rep.frames.begin(), rep.frames.end());
        log << name << ": " << rep.frames.size() << " frames, mean CD " << data::format_double(rep.mean_cd) << ", TSR "
            << data::format_double(rep.tsr) << "\n";
    }
    if (all.frames.empty()) throw DataError("no frame could be evaluated (sequences shorter than the window?)");
    all.cd_variant = cfg.eval.cd_variant;
    all.finalize();

    json report = all;
    report["sequences"] = per_sequence;
    report["checkpoint"] = args.checkpoint.filename().string();
    write_json(out / "metrics.json", report);
    {
        std::ofstream os(out / "metrics.txt", std::ios::binary);
        if (!os) throw DataError("cannot write " + (out / "metrics.txt").string());
        os << all.table();
    }
    log << all.table();

    if (args.assert_thresholds) {
        const bool ok = all.mean_cd <= cfg.eval.max_mean_cd && all.tsr >= cfg.eval.min_tsr;
        log << (ok ? "PASS" : "FAIL") << ": mean CD " << data::format_double(all.mean_cd) << " (max "
            << data::format_double(cfg.eval.max_mean_cd) << "), TSR " << data::format_double(all.tsr) << " (min "
            << data::format_double(cfg.eval.min_tsr) << ")\n";
        if (!ok) return kAcceptance;
    }
    return kOk;
}

// ---- gradcheck ------------------------------------------------------------

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& log) {
    gradcheck::SuiteOptions opts;
    opts.module = args.module;
    opts.probes = args.probes;
    opts.seed = args.common.seed.value_or(0);
    const auto& names = gradcheck::module_names();
    if (opts.module != "all" && std::find(names.begin(), names.end(), opts.module) == names.end())
        throw UsageError("unknown module '" + opts.module + "'");
    if (opts.probes == 0) throw UsageError("--probes must be positive");

    const std::vector<gradcheck::CaseReport> cases = gradcheck::run_suite(opts);
    bool ok = true;
    json modules = json::object();
    for (const std::string& m : names) {
        double worst = 0.0;
        std::size_t probes = 0, n = 0;
        bool passed = true;
        for (const auto& c : cases) {
            if (c.module != m) continue;
            worst = std::max(worst, c.report.max_rel_err);
            probes += c.report.probe_count;
            passed = passed && c.passed();
            ++n;
            if (!c.passed())
                log << "  FAIL " << c.module << "/" << c.name << " max rel err " << data::format_double(c.report.max_rel_err) << "\n";
        }
        if (n == 0) continue;
        ok = ok && passed;
        modules[m] = {{"cases", n}, {"probes", probes}, {"max_rel_err", worst}, {"passed", passed}};
        char line[160];
        std::snprintf(line, sizeof line, "%-9s %2zu cases %6zu probes  max rel err %.3e  %s\n", m.c_str(), n, probes, worst,
                      passed ? "ok" : "FAIL");
        log << line;
    }
    if (args.common.out) {
        fs::create_directories(*args.common.out);
        write_json(*args.common.out / "gradcheck.json",
                   {{"tolerance", gradcheck::kTolerance}, {"step", gradcheck::kStep}, {"modules", modules}, {"cases", cases}});
    }
    return ok ? kOk : kAcceptance;
}

int run_command(const std::function<int()>& command, std::ostream& err) {
    try {
        return command();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const config::ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const training::NumericalFailure& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kData;
    }
}

}  // namespace parco::cli
