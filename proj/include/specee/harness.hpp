#pragma once

#include "specee/engine.hpp"
#include "specee/model.hpp"
#include "specee/predictor.hpp"
#include "specee/scheduler.hpp"
#include "specee/trainer.hpp"
#include "specee/tree.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace specee {

struct ModelStageConfig {
    ModelConfig model;
    TrainConfig train;
};

struct DatasetSpec {
    std::string name;
    std::string path;
};

struct BenchConfig {
    std::vector<DatasetSpec> datasets;
    PromptPlan prompts{32, 32, 64, 32};
    std::vector<std::size_t> tree_branching{2, 2};
};

/// Everything one pipeline run needs. Relative paths resolve against
/// base_dir (the directory of the config file).
struct PipelineConfig {
    std::filesystem::path base_dir = ".";
    std::string corpus = "data/corpus.txt";
    ModelStageConfig target{ModelConfig::target_default(), {}};
    ModelStageConfig draft{ModelConfig::draft_default(), {}};
    std::size_t k = 4;
    float threshold = 0.5f;
    CollectConfig collect;
    PredictorTrainConfig predictor;
    PromptPlan profile{32, 32, 64, 64};
    ScheduleConfig schedule;
    BenchConfig bench;

    static PipelineConfig defaults();
    std::filesystem::path resolve(const std::string& path) const;
};

PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
PipelineConfig load_pipeline_config(const std::string& path);
nlohmann::json pipeline_config_to_json(const PipelineConfig& config);

/// Replaces every stage seed with values derived from `seed`.
void override_seeds(PipelineConfig& config, std::uint64_t seed);

enum class Stage { TrainModel, TrainDraft, TrainPredictors, Profile, Bench };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage stage);
Stage parse_stage(const std::string& name);

/// Artifact file names inside the output directory.
namespace artifacts {
inline constexpr const char* target = "target.spxw";
inline constexpr const char* draft = "draft.spxw";
inline constexpr const char* predictors = "predictors.spxp";
inline constexpr const char* profile = "profile.spxs";
inline constexpr const char* report_txt = "report.txt";
inline constexpr const char* report_jsonl = "report.jsonl";
inline constexpr const char* timing = "timing.jsonl";
inline constexpr const char* manifest = "manifest.json";
}  // namespace artifacts

class MissingArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FingerprintMismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StageOutcome {
    Stage stage;
    bool ran = false;  // false when the manifest showed it up to date
};

/// Runs one stage. Upstream artifacts must exist and match the hashes the
/// manifest recorded when they were produced. The stage is skipped when its
/// input fingerprint and outputs are unchanged, unless `force` is set.
StageOutcome run_stage(const PipelineConfig& config, const std::filesystem::path& out_dir, Stage stage,
                       bool force = false);

/// Runs the given stages in pipeline order.
std::vector<StageOutcome> run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir,
                                       const std::vector<Stage>& stages = all_stages(), bool force = false);

/// FNV-1a hash of a file's bytes; throws MissingArtifactError if absent.
std::uint64_t file_fingerprint(const std::filesystem::path& path);

std::vector<TokenId> load_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metrics

/// Exhaustive per-layer view of one generated position, on the engine's own
/// context.
struct OracleRecord {
    std::vector<TokenId> layer_argmax;  // per layer, full head
    std::size_t exit_layer = 0;         // first layer agreeing with the last
    TokenId full_token() const { return layer_argmax.back(); }
};

OracleRecord make_oracle_record(std::vector<TokenId> layer_argmax);

struct LayerConfusion {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::uint64_t total() const { return tp + fp + tn + fn; }
    double precision() const;
    double recall() const;
};

struct BenchReport {
    std::string dataset;
    std::string mode;
    std::size_t num_layers = 0;
    std::uint64_t tokens = 0;
    double avg_exit_layer = 0.0;
    double oracle_avg_exit_layer = 0.0;
    double agreement = 0.0;
    double active_layer_avg = 0.0;
    std::uint64_t predictor_evaluations = 0;
    std::uint64_t verified_exits = 0;
    std::vector<LayerConfusion> confusion;  // per layer, L-1 entries
    double online_hit_rate = 0.0;           // oracle exit inside the online set
    double online_base_rate = 0.0;          // |online set| / L
    double online_ratio() const { return online_base_rate > 0 ? online_hit_rate / online_base_rate : 0.0; }
};

/// Aggregates an early-exit trace against its aligned oracle records.
/// Throws std::invalid_argument when lengths differ.
BenchReport compute_metrics(std::span<const ExitRecord> trace, std::span<const OracleRecord> oracle,
                            std::size_t num_layers);

struct TreeBenchReport {
    std::string dataset;
    std::vector<std::size_t> branching;
    std::uint64_t steps = 0;
    std::uint64_t committed_tokens = 0;
    double avg_committed_per_step = 0.0;
    double avg_exit_layer = 0.0;
    std::uint64_t predictor_evaluations = 0;
    std::uint64_t evaluation_bound = 0;
    double agreement = 0.0;  // committed tokens equal to full greedy decoding
};

/// Engine run over dataset prompts with a reference full-model pass per token.
struct BenchRun {
    BenchReport report;
    std::vector<ExitRecord> trace;
    std::vector<OracleRecord> oracle;
    double seconds = 0.0;
};

BenchRun bench_engine(const TransformerModel& target, const TransformerModel& draft, const ExitPredictor* predictor,
                      const OfflineProfile* profile, const EngineConfig& config,
                      std::span<const std::vector<TokenId>> prompts, std::size_t max_new);

TreeBenchReport bench_tree(const TransformerModel& target, const TransformerModel& draft,
                           const ExitPredictor* predictor, const OfflineProfile* profile,
                           const TreeEngineConfig& config, std::span<const std::vector<TokenId>> prompts,
                           std::size_t max_new, double* seconds = nullptr);

std::string format_report_text(std::span<const BenchReport> rows, std::span<const TreeBenchReport> tree_rows);
std::string format_report_jsonl(std::span<const BenchReport> rows, std::span<const TreeBenchReport> tree_rows);

}  // namespace specee
