#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "parco/commands.hpp"

namespace {

using namespace parco::cli;

struct Globals {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
};

void add_globals(CLI::App& app, Globals& g) {
    app.add_option("--config", g.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Seed for the stream this command controls");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (default: PARCO_SDF_THREADS or 1)");
}

CommonArgs common(const Globals& g) {
    CommonArgs c;
    if (g.config) c.config = *g.config;
    c.seed = g.seed;
    if (g.out) c.out = *g.out;
    c.threads = resolve_threads(g.threads);
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Temporal point-cloud encoder with a FiLM-conditioned SIREN signed distance field"};
    app.require_subcommand(1);
    Globals g;

    CLI::App* gen = app.add_subcommand("gen", "Generate synthetic deforming torus sequences");
    add_globals(*gen, g);

    TrainArgs train;
    std::vector<std::string> train_data;
    std::optional<std::string> resume;
    CLI::App* tr = app.add_subcommand("train", "Train on sequences");
    add_globals(*tr, g);
    tr->add_option("--data", train_data, "Sequence directory or dataset root (repeatable)")->required();
    tr->add_option("--steps", train.steps, "Override optimizer.steps");
    tr->add_flag("--ablate-temporal", train.ablate_temporal, "Window of one frame (attention kept)");
    tr->add_flag("--no-attention", train.no_attention, "Skip the attention stack");
    tr->add_option("--resume", resume, "Continue from a training checkpoint")->check(CLI::ExistingFile);
    tr->add_flag("--timing", train.timing, "Write wall-clock timing.jsonl");

    ReconstructArgs rec;
    std::string rec_ckpt, rec_seq;
    CLI::App* rc = app.add_subcommand("reconstruct", "Extract the mesh for one frame");
    add_globals(*rc, g);
    rc->add_option("--checkpoint", rec_ckpt, "Model checkpoint")->required();
    rc->add_option("--data", rec_seq, "Sequence directory")->required();
    rc->add_option("-t,--frame", rec.t, "Window end frame")->required();

    EvalArgs ev;
    std::string ev_ckpt;
    std::vector<std::string> ev_data;
    CLI::App* evc = app.add_subcommand("eval", "Chamfer distance and topology success rate over held-out frames");
    add_globals(*evc, g);
    evc->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
    evc->add_option("--data", ev_data, "Sequence directory or dataset root (repeatable)")->required();
    evc->add_flag("--assert", ev.assert_thresholds, "Exit 4 when the eval thresholds in the config are missed");
    evc->add_flag("--heatmap", ev.heatmap, "Write per-vertex distance colored meshes");

    GradcheckArgs gc;
    CLI::App* gcc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    add_globals(*gcc, g);
    gcc->add_option("--module", gc.module, "autodiff, dual, encoder, sdfnet, loss or all");
    gcc->add_option("--probes", gc.probes, "Probes per case");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    return run_command(
        [&]() -> int {
            if (gen->parsed()) return cmd_gen({common(g)}, std::cout);
            if (tr->parsed()) {
                train.common = common(g);
                train.data.assign(train_data.begin(), train_data.end());
                if (resume) train.resume = *resume;
                return cmd_train(train, std::cout);
            }
            if (rc->parsed()) {
                rec.common = common(g);
                rec.checkpoint = rec_ckpt;
                rec.sequence = rec_seq;
                return cmd_reconstruct(rec, std::cout);
            }
            if (evc->parsed()) {
                ev.common = common(g);
                ev.checkpoint = ev_ckpt;
                ev.data.assign(ev_data.begin(), ev_data.end());
                return cmd_eval(ev, std::cout);
            }
            gc.common = common(g);
            return cmd_gradcheck(gc, std::cout);
        },
        std::cerr);
}
