#include "specee/speculation.hpp"

#include "specee/numeric.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace specee {

bool SpeculativeSet::contains(TokenId t) const
{
    return std::find(tokens.begin(), tokens.end(), t) != tokens.end();
}

SpeculativeSet topk_from_logits(std::span<const float> logits, std::size_t k)
{
    if (k == 0 || k > logits.size())
        throw std::invalid_argument("k must be in [1, vocab_size]");
    const auto probs = softmax(logits);
    std::vector<TokenId> order(logits.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](TokenId a, TokenId b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    SpeculativeSet s;
    s.tokens.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (auto t : s.tokens)
        s.draft_probs.push_back(probs[t]);
    return s;
}

SpeculativeSet propose_topk(const TransformerModel& draft, std::span<const TokenId> context, std::size_t k)
{
    if (context.empty())
        throw std::invalid_argument("empty context");
    if (k == 0 || k > draft.config().vocab_size)
        throw std::invalid_argument("k must be in [1, vocab_size]");
    DecodeState state(draft);
    const auto h = forward_to_layer(draft, context, draft.config().num_layers - 1, state);
    return topk_from_logits(full_head_logits(draft, h), k);
}

Drafter::Drafter(const TransformerModel& draft) : draft_(&draft) {}

std::vector<float> Drafter::next_logits(std::span<const TokenId> context)
{
    if (context.empty())
        throw std::invalid_argument("empty context");
    const bool extends = state_ && fed_.size() <= context.size() &&
                         std::equal(fed_.begin(), fed_.end(), context.begin());
    if (!extends) {
        state_.emplace(*draft_);
        fed_.clear();
    }
    for (std::size_t i = fed_.size(); i < context.size(); ++i) {
        state_->begin_token(context[i]);
        fed_.push_back(context[i]);
    }
    const auto h = state_->forward_to_layer(draft_->config().num_layers - 1);
    return full_head_logits(*draft_, h);
}

SpeculativeSet Drafter::propose(std::span<const TokenId> context, std::size_t k)
{
    if (k == 0 || k > draft_->config().vocab_size)
        throw std::invalid_argument("k must be in [1, vocab_size]");
    return topk_from_logits(next_logits(context), k);
}

std::vector<std::size_t> TokenTree::children(std::size_t node) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = node + 1; i < nodes.size(); ++i)
        if (nodes[i].parent == static_cast<int>(node))
            out.push_back(i);
    return out;
}

bool TokenTree::is_leaf(std::size_t node) const
{
    return nodes[node].depth == branching.size();
}

TokenTree build_token_tree(const TransformerModel& draft, std::span<const TokenId> context,
                           std::span<const std::size_t> branching)
{
    if (context.empty())
        throw std::invalid_argument("empty context");
    if (branching.empty())
        throw std::invalid_argument("branching must be non-empty");
    for (auto b : branching)
        if (b < 1 || b > draft.config().vocab_size)
            throw std::invalid_argument("branching counts must be in [1, vocab_size]");
    if (context.size() + branching.size() > draft.config().max_context)
        throw std::length_error("token tree exceeds max_context");

    TokenTree tree;
    tree.branching.assign(branching.begin(), branching.end());
    tree.nodes.push_back({context.back(), -1, 0, 1.0f});

    // Frontier of (node index, draft state positioned at that node).
    DecodeState root_state(draft);
    for (auto t : context)
        root_state.begin_token(t);
    std::vector<std::pair<std::size_t, DecodeState>> frontier;
    frontier.emplace_back(0, std::move(root_state));

    const std::size_t last = draft.config().num_layers - 1;
    for (std::size_t depth = 0; depth < branching.size(); ++depth) {
        std::vector<std::pair<std::size_t, DecodeState>> next;
        for (auto& [node, state] : frontier) {
            const auto h = state.forward_to_layer(last);
            const auto set = topk_from_logits(full_head_logits(draft, h), branching[depth]);
            for (std::size_t j = 0; j < set.size(); ++j) {
                const std::size_t child = tree.nodes.size();
                tree.nodes.push_back({set.tokens[j], static_cast<int>(node), depth + 1, set.draft_probs[j]});
                if (depth + 1 < branching.size()) {
                    DecodeState fork = state;
                    fork.begin_token(set.tokens[j]);
                    next.emplace_back(child, std::move(fork));
                }
            }
        }
        frontier = std::move(next);
    }
    return tree;
}

std::vector<std::vector<std::size_t>> enumerate_paths(const TokenTree& tree)
{
    std::vector<std::vector<std::size_t>> paths;
    for (std::size_t i = 1; i < tree.nodes.size(); ++i) {
        if (!tree.is_leaf(i))
            continue;
        std::vector<std::size_t> path;
        for (int n = static_cast<int>(i); n > 0; n = tree.nodes[static_cast<std::size_t>(n)].parent)
            path.push_back(static_cast<std::size_t>(n));
        std::reverse(path.begin(), path.end());
        paths.push_back(std::move(path));
    }
    return paths;
}

std::vector<TokenId> path_context(const TokenTree& tree, std::span<const TokenId> context, std::size_t node)
{
    std::vector<TokenId> tail;
    for (int n = static_cast<int>(node); n > 0; n = tree.nodes[static_cast<std::size_t>(n)].parent)
        tail.push_back(tree.nodes[static_cast<std::size_t>(n)].token);
    std::vector<TokenId> out(context.begin(), context.end());
    out.insert(out.end(), tail.rbegin(), tail.rend());
    return out;
}

}  // namespace specee
