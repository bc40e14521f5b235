#pragma once

#include "specee/engine.hpp"
#include "specee/model.hpp"
#include "specee/scheduler.hpp"
#include "specee/speculation.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace specee {

/// One root-to-leaf path of a token tree handled as a single exit unit.
/// per_node_spec[i] belongs to path[i]: the node's children if it is
/// internal, a fresh draft proposal if it is the leaf.
struct HyperToken {
    std::vector<std::size_t> path;  // depth 1 .. leaf
    std::vector<SpeculativeSet> per_node_spec;
};

/// Draft top-k for the position after every tree node (index = node id).
std::vector<SpeculativeSet> node_proposals(const TransformerModel& draft, const TokenTree& tree,
                                           std::span<const TokenId> context, std::size_t k);

/// The children of `node` as a speculative set, in tree order.
SpeculativeSet children_set(const TokenTree& tree, std::size_t node);

/// One hyper-token per leaf, in leaf order.
std::vector<HyperToken> merge_paths(const TransformerModel& draft, const TokenTree& tree,
                                    std::span<const TokenId> context, std::size_t k);

/// Sliced head logits for several rows in one pass over the LM head. Row j
/// equals sliced_head_logits(model, hidden[j], ids[j]) bit for bit.
std::vector<std::vector<float>> grouped_speculative_logits(const TransformerModel& model,
                                                           std::span<const std::span<const float>> hidden,
                                                           std::span<const std::vector<TokenId>> ids);

/// A path exits at the current layer only if every node's probability
/// exceeds the threshold.
bool hypertoken_exit_decision(std::span<const float> probabilities, float threshold);

/// Hidden state of every tree node after every layer ([layer][node]),
/// computed with ancestor-only attention on top of the context.
std::vector<std::vector<std::vector<float>>> tree_hidden_states(const TransformerModel& target,
                                                                std::span<const TokenId> context,
                                                                const TokenTree& tree);

/// Exit layer of a path from its nodes' exit layers: the latest one.
std::size_t rearmost_exit(std::span<const std::size_t> node_exit_layers);

/// Latest oracle exit layer among the path's nodes, each node being the
/// position that predicts the token after it.
std::size_t hypertoken_oracle_exit(const TransformerModel& target, std::span<const TokenId> context,
                                   const TokenTree& tree, std::span<const std::size_t> path);

struct TreeEngineConfig {
    std::vector<std::size_t> branching{2, 2};
    std::size_t k = 4;
    float threshold = 0.5f;
    ScheduleMode mode = ScheduleMode::AllLayers;
    ScheduleConfig schedule;
};

struct TreeStepResult {
    std::vector<TokenId> accepted_tokens;  // matched draft tokens
    TokenId correction_token = 0;
    std::size_t accepted_path = 0;          // index into the step's paths
    std::size_t exit_layer = 0;             // exit layer of the accepted path
    std::vector<std::size_t> path_exit_layers;
    std::vector<bool> path_verified;        // early exit verified per path
    std::size_t num_paths = 0;
    std::size_t max_path_length = 0;        // positions per path, root included
    std::vector<std::size_t> scheduled_layers;
    std::uint64_t predictor_evaluations = 0;
    std::size_t layers_run = 0;             // deepest layer run + 1

    /// accepted_tokens followed by the correction token.
    std::vector<TokenId> committed() const;
    /// |paths| x |scheduled layers| x max path length.
    std::uint64_t evaluation_bound() const;
};

/// Tree speculative decoding with early exit. The draft proposes a token tree;
/// the target runs the whole tree layer by layer with tree attention, each
/// path exits when all of its positions agree to, and the longest path that
/// matches the target's own tokens is committed.
class TreeEngine {
public:
    TreeEngine(const TransformerModel& target, const TransformerModel& draft, const ExitPredictor* predictor,
               const OfflineProfile* profile, TreeEngineConfig config);

    void reset(std::span<const TokenId> prompt);
    TreeStepResult step();

    const std::vector<TokenId>& context() const { return context_; }
    const OnlineState& online() const { return online_; }
    std::uint64_t predictor_evaluations() const { return evaluations_; }

private:
    const TransformerModel& target_;
    const TransformerModel& draft_;
    const ExitPredictor* predictor_;
    const OfflineProfile* profile_;
    TreeEngineConfig config_;
    std::vector<TokenId> context_;
    std::optional<DecodeState> state_;
    OnlineState online_;
    std::uint64_t evaluations_ = 0;
};

/// Single step on a fresh engine.
TreeStepResult tree_generate_step(const TransformerModel& target, const TransformerModel& draft,
                                  const ExitPredictor* predictor, const OfflineProfile* profile,
                                  const TreeEngineConfig& config, std::span<const TokenId> context);

/// Runs tree steps until at least `max_new` tokens are committed; the
/// result is truncated to exactly `max_new`.
std::vector<TokenId> tree_generate(const TransformerModel& target, const TransformerModel& draft,
                                   const ExitPredictor* predictor, const OfflineProfile* profile,
                                   const TreeEngineConfig& config, std::span<const TokenId> prompt,
                                   std::size_t max_new, std::vector<TreeStepResult>* steps = nullptr);

std::string format_tree_trace_record(const TreeStepResult& step, std::span<const std::size_t> branching);

}  // namespace specee
