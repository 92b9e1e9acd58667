#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "parco/config.hpp"

// Subcommand implementations behind the parco_sdf executable. Each returns an
// exit code; run_command maps exceptions to the documented codes.
namespace parco::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3, kAcceptance = 4 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CommonArgs {
    std::optional<std::filesystem::path> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> out;  // gradcheck writes a report only when set
    std::size_t threads = 1;
};

struct GenArgs {
    CommonArgs common;
};

struct TrainArgs {
    CommonArgs common;
    std::vector<std::filesystem::path> data;
    std::optional<std::size_t> steps;
    bool ablate_temporal = false;  // window of one frame, attention kept
    bool no_attention = false;
    std::optional<std::filesystem::path> resume;
    bool timing = false;  // wall-clock log in timing.jsonl
};

struct ReconstructArgs {
    CommonArgs common;
    std::filesystem::path checkpoint;
    std::filesystem::path sequence;
    std::size_t t = 0;
};

struct EvalArgs {
    CommonArgs common;
    std::filesystem::path checkpoint;
    std::vector<std::filesystem::path> data;
    bool assert_thresholds = false;
    bool heatmap = false;
};

struct GradcheckArgs {
    CommonArgs common;
    std::string module = "all";
    std::size_t probes = 100;
};

/// Loads --config, or the defaults when absent. Each command applies --seed
/// to the stream it owns: gen -> data.seed, train -> run.seed, reconstruct
/// and eval -> eval.augment_seed, gradcheck -> the suite seed.
config::RunConfig resolve_config(const CommonArgs& common);

/// --threads when positive, else PARCO_SDF_THREADS, else 1.
std::size_t resolve_threads(std::optional<std::size_t> flag);

/// A directory holding sequence.json is one sequence; otherwise its seq_*
/// subdirectories are, in name order.
std::vector<std::filesystem::path> sequence_dirs(const std::filesystem::path& dir);

/// Sequences used for training and evaluation: every sequence named
/// directly, and for dataset roots all but (train) or only (eval) the last
/// `holdout` sequences.
std::vector<std::filesystem::path> training_sequences(std::span<const std::filesystem::path> dirs, std::size_t holdout);
std::vector<std::filesystem::path> evaluation_sequences(std::span<const std::filesystem::path> dirs, std::size_t holdout);

int cmd_gen(const GenArgs& args, std::ostream& log);
int cmd_train(const TrainArgs& args, std::ostream& log);
int cmd_reconstruct(const ReconstructArgs& args, std::ostream& log);
int cmd_eval(const EvalArgs& args, std::ostream& log);
int cmd_gradcheck(const GradcheckArgs& args, std::ostream& log);

/// Runs a command, reporting failures on `err` and mapping them to exit codes.
int run_command(const std::function<int()>& command, std::ostream& err);

inline constexpr double kHeatmapMax = 0.05;  // color scale for per-vertex distances

}  // namespace parco::cli
