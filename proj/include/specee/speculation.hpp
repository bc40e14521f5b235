#pragma once

#include "specee/model.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace specee {

/// The reduced search space for one decoding position: k distinct candidate
/// tokens ordered by draft probability (ties by lower id).
struct SpeculativeSet {
    std::vector<TokenId> tokens;
    std::vector<float> draft_probs;

    std::size_t size() const { return tokens.size(); }
    bool contains(TokenId t) const;
};

/// Top-k of a logit vector. Probabilities are softmax over the full vector.
SpeculativeSet topk_from_logits(std::span<const float> logits, std::size_t k);

/// Runs the draft over `context` and returns its k most likely next tokens.
SpeculativeSet propose_topk(const TransformerModel& draft, std::span<const TokenId> context, std::size_t k);

/// Incremental draft runner for a growing context. Produces exactly what
/// propose_topk would on the same context, without re-running the prefix.
class Drafter {
public:
    explicit Drafter(const TransformerModel& draft);

    SpeculativeSet propose(std::span<const TokenId> context, std::size_t k);

    /// Draft logits for the next token after `context`.
    std::vector<float> next_logits(std::span<const TokenId> context);

    const TransformerModel& model() const { return *draft_; }

private:
    const TransformerModel* draft_;
    std::optional<DecodeState> state_;
    std::vector<TokenId> fed_;
};

struct TreeNode {
    TokenId token;
    int parent;  // -1 for the root
    std::size_t depth;
    float draft_prob;
};

/// Draft token tree. Node 0 is the root (the last committed context token);
/// nodes are stored breadth-first with each parent's children contiguous.
struct TokenTree {
    std::vector<TreeNode> nodes;
    std::vector<std::size_t> branching;

    std::size_t depth() const { return branching.size(); }
    std::vector<std::size_t> children(std::size_t node) const;
    bool is_leaf(std::size_t node) const;
};

/// Each depth-d node gets the top branching[d-1] draft continuations of its
/// root-to-node path as children.
TokenTree build_token_tree(const TransformerModel& draft, std::span<const TokenId> context,
                           std::span<const std::size_t> branching);

/// One path per leaf, in leaf order; each lists node indices from depth 1 to
/// the leaf (the root is implicit).
std::vector<std::vector<std::size_t>> enumerate_paths(const TokenTree& tree);

/// Context extended with the tokens on the path from the root to `node`.
std::vector<TokenId> path_context(const TokenTree& tree, std::span<const TokenId> context, std::size_t node);

}  // namespace specee
