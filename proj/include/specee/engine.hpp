#pragma once

#include "specee/model.hpp"
#include "specee/predictor.hpp"
#include "specee/scheduler.hpp"
#include "specee/speculation.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace specee {

/// Source of per-layer exit probabilities.
class ExitPredictor {
public:
    virtual ~ExitPredictor() = default;
    virtual bool has_layer(std::size_t layer) const = 0;
    virtual float exit_probability(std::size_t layer, const FeatureVector& features) const = 0;
};

class MlpExitPredictor final : public ExitPredictor {
public:
    explicit MlpExitPredictor(PredictorBank bank) : bank_(std::move(bank)) {}
    bool has_layer(std::size_t layer) const override { return bank_.has(layer); }
    float exit_probability(std::size_t layer, const FeatureVector& features) const override;
    const PredictorBank& bank() const { return bank_; }

private:
    PredictorBank bank_;
};

/// Fixed probability at every layer: 0 never exits, 1 always tries to.
class ConstantExitPredictor final : public ExitPredictor {
public:
    explicit ConstantExitPredictor(float probability) : p_(probability) {}
    bool has_layer(std::size_t) const override { return true; }
    float exit_probability(std::size_t, const FeatureVector&) const override { return p_; }

private:
    float p_;
};

enum class ScheduleMode { AllLayers, TwoLevel };

struct EngineConfig {
    std::size_t k = 4;
    float threshold = 0.5f;
    ScheduleMode mode = ScheduleMode::AllLayers;
    /// Replace the predictor with "exit iff this layer's argmax equals the
    /// full model's argmax" (evaluation only; needs a reference forward).
    bool oracle = false;
    /// Fill deeper caches of exited tokens from their exit hidden state
    /// instead of recomputing the skipped layers. Not exact.
    bool stale_cache = false;
    ScheduleConfig schedule;
};

struct PredictorEvaluation {
    std::size_t layer;
    bool fired;
};

struct ExitRecord {
    TokenId token = 0;
    std::size_t exit_layer = 0;  // L-1 when no early exit
    bool predictor_fired = false;
    bool verified = false;
    std::vector<std::size_t> active_layers;
    std::vector<std::size_t> online_layers;  // online part of the schedule
    std::vector<PredictorEvaluation> evaluations;
    std::uint32_t full_head_projections = 0;
};

struct EngineCounters {
    std::uint64_t tokens = 0;
    std::uint64_t predictor_evaluations = 0;
    std::uint64_t predictor_positives = 0;
    std::uint64_t full_head_projections = 0;
    std::uint64_t sliced_head_projections = 0;
    std::uint64_t verified_exits = 0;
    std::uint64_t active_layer_total = 0;
};

/// Full-head check after a positive prediction: the argmax token if it is one
/// of the speculative tokens, otherwise nothing (keep going deeper).
std::optional<TokenId> verify_exit(const TransformerModel& model, std::span<const float> hidden,
                                   const SpeculativeSet& spec);

/// Smallest layer whose full-head argmax equals the final layer's, by
/// exhaustive per-layer check.
std::size_t oracle_exit_layer(const TransformerModel& target, std::span<const TokenId> context);

/// Argmax token of every layer for the next position after `context`.
std::vector<TokenId> per_layer_argmax(const TransformerModel& target, std::span<const TokenId> context);

/// Autoregressive decoding with early exits. One instance per stream; the
/// models, predictor and profile are borrowed and must outlive the engine.
class ExitEngine {
public:
    ExitEngine(const TransformerModel& target, const TransformerModel& draft, const ExitPredictor* predictor,
               const OfflineProfile* profile, EngineConfig config);

    /// Starts a new stream from `prompt`; clears caches and online state but
    /// keeps counters.
    void reset(std::span<const TokenId> prompt);

    /// Emits the next token and appends it to the context.
    ExitRecord generate_token();

    const std::vector<TokenId>& context() const { return context_; }
    const EngineCounters& counters() const { return counters_; }
    const OnlineState& online() const { return online_; }
    const EngineConfig& config() const { return config_; }
    std::uint64_t layer_evaluations() const;

    /// Layers that will run predictors for the next token.
    std::vector<std::size_t> scheduled_layers() const;

private:
    const TransformerModel& target_;
    const ExitPredictor* predictor_;
    const OfflineProfile* profile_;
    EngineConfig config_;
    Drafter drafter_;
    std::vector<TokenId> context_;
    std::optional<DecodeState> state_;
    std::optional<DecodeState> reference_;  // oracle mode only
    OnlineState online_;
    EngineCounters counters_;
    std::uint64_t retired_layer_evaluations_ = 0;
};

struct GenerationResult {
    std::vector<TokenId> tokens;
    std::vector<ExitRecord> records;
};

GenerationResult generate(const TransformerModel& target, const TransformerModel& draft,
                          const ExitPredictor* predictor, const OfflineProfile* profile, const EngineConfig& config,
                          std::span<const TokenId> prompt, std::size_t max_new);

/// Plain greedy decoding with the full model.
std::vector<TokenId> greedy_generate(const TransformerModel& target, std::span<const TokenId> prompt,
                                     std::size_t max_new);

/// Prompt windows cut from a corpus.
struct PromptPlan {
    std::size_t prompt_len = 32;
    std::size_t max_new = 32;
    std::size_t stride = 64;
    std::size_t max_segments = 0;  // 0 = all
};

std::vector<std::vector<TokenId>> make_prompts(std::span<const TokenId> corpus, const PromptPlan& plan);

/// Runs all-layer early-exit generation over the corpus prompts and ranks
/// layers by how often a verified exit happened there.
OfflineProfile profile_offline(const TransformerModel& target, const TransformerModel& draft,
                               const ExitPredictor& predictor, std::span<const TokenId> corpus,
                               const PromptPlan& plan, const EngineConfig& config, std::uint64_t fingerprint);

/// One line of the trace output.
std::string format_trace_record(const ExitRecord& record);

}  // namespace specee
