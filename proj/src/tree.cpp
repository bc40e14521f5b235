#include "specee/tree.hpp"

#include "specee/predictor.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace specee {

namespace {

// Runs tree nodes layer by layer on top of a decode state whose newest
// position is the tree root. Node rows attend to the cached context rows and
// then to their ancestors' rows, which is the same order a plain sequence
// would use.
class TreeForward {
public:
    TreeForward(const TransformerModel& model, DecodeState& state, const TokenTree& tree)
        : model_(model), state_(state), tree_(tree)
    {
        const std::size_t d = model.config().hidden_dim;
        if (state.length() == 0 || state.current_layer() != -1)
            throw std::logic_error("tree root must be a fresh position");
        base_ = state.length() - 1;
        const std::size_t n = tree.nodes.size();
        hidden_.assign(n, std::vector<float>(d));
        keys_.assign(n, std::vector<float>(d));
        values_.assign(n, std::vector<float>(d));
        ancestors_.resize(n);
        for (std::size_t j = 1; j < n; ++j) {
            embed_token(model, tree.nodes[j].token, base_ + tree.nodes[j].depth, hidden_[j]);
            for (int a = tree.nodes[j].parent; a > 0; a = tree.nodes[static_cast<std::size_t>(a)].parent)
                ancestors_[j].push_back(static_cast<std::size_t>(a));
            std::reverse(ancestors_[j].begin(), ancestors_[j].end());
        }
    }

    void run_layer(std::size_t layer, const std::vector<bool>& needed)
    {
        const auto root = state_.run_layer(layer);
        std::copy(root.begin(), root.end(), hidden_[0].begin());
        for (std::size_t j = 1; j < tree_.nodes.size(); ++j) {
            if (!needed[j])
                continue;
            AttentionView view;
            for (std::size_t t = 0; t <= base_; ++t) {
                view.keys.push_back(state_.cached_key(layer, t).data());
                view.values.push_back(state_.cached_value(layer, t).data());
            }
            for (auto a : ancestors_[j]) {
                view.keys.push_back(keys_[a].data());
                view.values.push_back(values_[a].data());
            }
            view.keys.push_back(keys_[j].data());
            view.values.push_back(values_[j].data());
            layer_step(model_, layer, hidden_[j], keys_[j], values_[j], view);
        }
    }

    std::span<const float> hidden(std::size_t node) const { return hidden_[node]; }

private:
    const TransformerModel& model_;
    DecodeState& state_;
    const TokenTree& tree_;
    std::size_t base_ = 0;
    std::vector<std::vector<float>> hidden_, keys_, values_;
    std::vector<std::vector<std::size_t>> ancestors_;
};

std::vector<TokenId> path_tokens(const TokenTree& tree, std::span<const std::size_t> path)
{
    std::vector<TokenId> out;
    for (auto n : path)
        out.push_back(tree.nodes[n].token);
    return out;
}

}  // namespace

std::vector<SpeculativeSet> node_proposals(const TransformerModel& draft, const TokenTree& tree,
                                           std::span<const TokenId> context, std::size_t k)
{
    if (context.empty())
        throw std::invalid_argument("empty context");
    const std::size_t last = draft.config().num_layers - 1;
    std::vector<std::optional<DecodeState>> states(tree.nodes.size());
    std::vector<SpeculativeSet> out(tree.nodes.size());
    states[0].emplace(draft);
    for (auto t : context)
        states[0]->begin_token(t);
    // BFS order guarantees parents come first.
    for (std::size_t j = 0; j < tree.nodes.size(); ++j) {
        if (j > 0) {
            const auto parent = static_cast<std::size_t>(tree.nodes[j].parent);
            states[j] = states[parent];
            states[j]->begin_token(tree.nodes[j].token);
        }
        out[j] = topk_from_logits(full_head_logits(draft, states[j]->forward_to_layer(last)), k);
    }
    return out;
}

SpeculativeSet children_set(const TokenTree& tree, std::size_t node)
{
    SpeculativeSet s;
    for (auto c : tree.children(node)) {
        s.tokens.push_back(tree.nodes[c].token);
        s.draft_probs.push_back(tree.nodes[c].draft_prob);
    }
    return s;
}

std::vector<HyperToken> merge_paths(const TransformerModel& draft, const TokenTree& tree,
                                    std::span<const TokenId> context, std::size_t k)
{
    std::vector<HyperToken> out;
    const auto proposals = node_proposals(draft, tree, context, k);
    for (const auto& path : enumerate_paths(tree)) {
        HyperToken h;
        h.path = path;
        for (auto n : path) {
            if (tree.is_leaf(n))
                h.per_node_spec.push_back(proposals[n]);
            else
                h.per_node_spec.push_back(children_set(tree, n));
        }
        out.push_back(std::move(h));
    }
    return out;
}

std::vector<std::vector<float>> grouped_speculative_logits(const TransformerModel& model,
                                                           std::span<const std::span<const float>> hidden,
                                                           std::span<const std::vector<TokenId>> ids)
{
    if (hidden.empty())
        throw std::invalid_argument("no rows");
    if (hidden.size() != ids.size())
        throw std::invalid_argument("row and id-list counts differ");
    const std::size_t v = model.config().vocab_size;
    for (const auto& list : ids) {
        if (list.empty())
            throw std::invalid_argument("empty token id list");
        for (auto id : list)
            if (id >= v)
                throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    }
    std::vector<std::vector<float>> normed;
    std::vector<std::vector<float>> out;
    for (std::size_t r = 0; r < hidden.size(); ++r) {
        normed.push_back(final_norm(model, hidden[r]));
        out.emplace_back(ids[r].size(), 0.0f);
    }
    const float* w = model.lm_head.data.data();
    const std::size_t d = model.config().hidden_dim;
    for (std::size_t i = 0; i < d; ++i) {
        const float* row = w + i * v;
        for (std::size_t r = 0; r < hidden.size(); ++r) {
            const float xi = normed[r][i];
            auto& o = out[r];
            const auto& list = ids[r];
            for (std::size_t j = 0; j < list.size(); ++j)
                o[j] += xi * row[list[j]];
        }
    }
    return out;
}

bool hypertoken_exit_decision(std::span<const float> probabilities, float threshold)
{
    if (probabilities.empty())
        throw std::invalid_argument("hyper-token has no probabilities");
    return std::all_of(probabilities.begin(), probabilities.end(),
                       [&](float p) { return decide_exit(p, threshold); });
}

std::vector<std::vector<std::vector<float>>> tree_hidden_states(const TransformerModel& target,
                                                                std::span<const TokenId> context,
                                                                const TokenTree& tree)
{
    if (context.empty())
        throw std::invalid_argument("empty context");
    if (tree.nodes.empty() || tree.nodes[0].token != context.back())
        throw std::invalid_argument("tree root must be the last context token");
    if (context.size() + tree.depth() > target.config().max_context)
        throw std::length_error("token tree exceeds max_context");
    DecodeState state(target);
    for (auto t : context)
        state.begin_token(t);
    TreeForward fwd(target, state, tree);
    const std::vector<bool> all(tree.nodes.size(), true);
    std::vector<std::vector<std::vector<float>>> out(target.config().num_layers);
    for (std::size_t l = 0; l < out.size(); ++l) {
        fwd.run_layer(l, all);
        for (std::size_t j = 0; j < tree.nodes.size(); ++j) {
            const auto h = fwd.hidden(j);
            out[l].emplace_back(h.begin(), h.end());
        }
    }
    return out;
}

std::size_t rearmost_exit(std::span<const std::size_t> node_exit_layers)
{
    if (node_exit_layers.empty())
        throw std::invalid_argument("no exit layers");
    return *std::max_element(node_exit_layers.begin(), node_exit_layers.end());
}

std::size_t hypertoken_oracle_exit(const TransformerModel& target, std::span<const TokenId> context,
                                   const TokenTree& tree, std::span<const std::size_t> path)
{
    if (path.empty())
        throw std::invalid_argument("empty path");
    for (auto n : path)
        if (n == 0 || n >= tree.nodes.size())
            throw std::out_of_range("path node out of range");
    const auto states = tree_hidden_states(target, context, tree);
    const std::size_t last = states.size() - 1;
    std::vector<std::size_t> exits;
    for (auto n : path) {
        const auto final_token = argmax(full_head_logits(target, states[last][n]));
        std::size_t exit = last;
        for (std::size_t l = 0; l < last; ++l)
            if (argmax(full_head_logits(target, states[l][n])) == final_token) {
                exit = l;
                break;
            }
        exits.push_back(exit);
    }
    return rearmost_exit(exits);
}

// ---------------------------------------------------------------------------

std::vector<TokenId> TreeStepResult::committed() const
{
    auto out = accepted_tokens;
    out.push_back(correction_token);
    return out;
}

std::uint64_t TreeStepResult::evaluation_bound() const
{
    return static_cast<std::uint64_t>(num_paths) * scheduled_layers.size() * max_path_length;
}

TreeEngine::TreeEngine(const TransformerModel& target, const TransformerModel& draft, const ExitPredictor* predictor,
                       const OfflineProfile* profile, TreeEngineConfig config)
    : target_(target),
      draft_(draft),
      predictor_(predictor),
      profile_(profile),
      config_(std::move(config)),
      online_(target.config().num_layers, config_.schedule.queue_length, config_.schedule.radius)
{
    const std::size_t layers = target.config().num_layers;
    if (draft.config().vocab_size != target.config().vocab_size)
        throw std::invalid_argument("draft and target vocabularies differ");
    if (config_.branching.empty())
        throw std::invalid_argument("branching must be non-empty");
    if (config_.k < 1 || config_.k > target.config().vocab_size)
        throw std::invalid_argument("k must be in [1, vocab_size]");
    if (!predictor_)
        throw std::invalid_argument("tree engine needs a predictor");
    config_.schedule.validate(layers);
    if (config_.mode == ScheduleMode::TwoLevel && (!profile_ || profile_->num_layers() != layers))
        throw std::invalid_argument("two-level scheduling needs a matching offline profile");
}

void TreeEngine::reset(std::span<const TokenId> prompt)
{
    if (prompt.empty())
        throw std::invalid_argument("empty prompt");
    context_.assign(prompt.begin(), prompt.end());
    state_.emplace(target_);
    for (auto t : context_)
        state_->begin_token(t);
    online_ = OnlineState(target_.config().num_layers, config_.schedule.queue_length, config_.schedule.radius);
}

TreeStepResult TreeEngine::step()
{
    if (!state_)
        throw std::logic_error("step before reset");
    const std::size_t layers = target_.config().num_layers;
    const std::size_t last = layers - 1;
    const std::size_t depth = config_.branching.size();
    const std::size_t limit = std::min(target_.config().max_context, draft_.config().max_context);
    if (context_.size() + depth + 1 > limit)
        throw std::length_error("tree step would exceed max_context");

    const auto tree = build_token_tree(draft_, context_, config_.branching);
    const auto proposals = node_proposals(draft_, tree, context_, config_.k);
    const auto paths = enumerate_paths(tree);
    const std::size_t n_nodes = tree.nodes.size();

    // Positions of a path: the root, then every path node. Position i predicts
    // the token of path[i] (or the bonus token after the leaf).
    std::vector<std::vector<std::size_t>> positions;
    for (const auto& p : paths) {
        std::vector<std::size_t> pos{0};
        pos.insert(pos.end(), p.begin(), p.end());
        positions.push_back(std::move(pos));
    }
    std::vector<SpeculativeSet> verify_set(n_nodes);
    std::vector<std::vector<TokenId>> feature_ids(n_nodes);
    for (std::size_t j = 0; j < n_nodes; ++j) {
        verify_set[j] = tree.is_leaf(j) ? proposals[j] : children_set(tree, j);
        feature_ids[j] = proposals[j].tokens;
    }

    TreeStepResult res;
    res.num_paths = paths.size();
    res.max_path_length = depth + 1;
    if (config_.mode == ScheduleMode::TwoLevel) {
        res.scheduled_layers = active_layers(*profile_, online_, config_.schedule);
    } else {
        res.scheduled_layers.resize(last);
        std::iota(res.scheduled_layers.begin(), res.scheduled_layers.end(), std::size_t{0});
    }
    std::vector<bool> scheduled(layers, false);
    for (auto l : res.scheduled_layers) {
        scheduled[l] = true;
        if (!predictor_->has_layer(l))
            throw std::runtime_error("missing predictor for active layer " + std::to_string(l));
    }

    res.path_exit_layers.assign(paths.size(), last);
    res.path_verified.assign(paths.size(), false);
    std::vector<bool> active(paths.size(), true);
    std::vector<std::vector<TokenId>> exit_argmax(paths.size());
    std::vector<std::vector<float>> prev(n_nodes, uniform_probs(config_.k));

    TreeForward fwd(target_, *state_, tree);
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<bool> needed(n_nodes, false);
        for (std::size_t p = 0; p < paths.size(); ++p)
            if (active[p])
                for (auto j : positions[p])
                    needed[j] = true;
        fwd.run_layer(l, needed);
        res.layers_run = l + 1;

        std::vector<std::optional<TokenId>> full_argmax(n_nodes);
        auto argmax_at = [&](std::size_t j) {
            if (!full_argmax[j])
                full_argmax[j] = static_cast<TokenId>(argmax(full_head_logits(target_, fwd.hidden(j))));
            return *full_argmax[j];
        };

        if (l == last) {
            for (std::size_t p = 0; p < paths.size(); ++p) {
                if (!active[p])
                    continue;
                for (auto j : positions[p])
                    exit_argmax[p].push_back(argmax_at(j));
                active[p] = false;
            }
            break;
        }
        if (!scheduled[l])
            continue;

        std::vector<std::size_t> eval_nodes;
        for (std::size_t j = 0; j < n_nodes; ++j)
            if (needed[j])
                eval_nodes.push_back(j);
        std::vector<std::span<const float>> rows;
        std::vector<std::vector<TokenId>> ids;
        for (auto j : eval_nodes) {
            rows.push_back(fwd.hidden(j));
            ids.push_back(feature_ids[j]);
        }
        const auto logits = grouped_speculative_logits(target_, rows, ids);
        std::vector<float> prob(n_nodes, 0.0f);
        for (std::size_t r = 0; r < eval_nodes.size(); ++r) {
            const auto j = eval_nodes[r];
            const auto features = extract_features(logits[r], prev[j]);
            prev[j] = features.local_probs;
            prob[j] = predictor_->exit_probability(l, features);
        }
        res.predictor_evaluations += eval_nodes.size();

        for (std::size_t p = 0; p < paths.size(); ++p) {
            if (!active[p])
                continue;
            std::vector<float> path_probs;
            for (auto j : positions[p])
                path_probs.push_back(prob[j]);
            if (!hypertoken_exit_decision(path_probs, config_.threshold))
                continue;
            std::vector<TokenId> am;
            bool ok = true;
            for (auto j : positions[p]) {
                am.push_back(argmax_at(j));
                if (!verify_set[j].contains(am.back())) {
                    ok = false;
                    break;
                }
            }
            if (!ok)
                continue;
            exit_argmax[p] = std::move(am);
            res.path_exit_layers[p] = l;
            res.path_verified[p] = true;
            active[p] = false;
        }
        if (std::none_of(active.begin(), active.end(), [](bool a) { return a; }))
            break;
    }

    // Longest matching path; ties go to the earlier leaf.
    std::size_t best = 0, best_len = 0;
    for (std::size_t p = 0; p < paths.size(); ++p) {
        std::size_t m = 0;
        while (m < paths[p].size() && exit_argmax[p][m] == tree.nodes[paths[p][m]].token)
            ++m;
        if (p == 0 || m > best_len) {
            best = p;
            best_len = m;
        }
    }
    res.accepted_path = best;
    res.exit_layer = res.path_exit_layers[best];
    res.accepted_tokens = path_tokens(tree, std::span(paths[best]).first(best_len));
    res.correction_token = exit_argmax[best][best_len];
    evaluations_ += res.predictor_evaluations;

    for (auto t : res.committed()) {
        online_.update(res.exit_layer);
        context_.push_back(t);
        state_->begin_token(t);
    }
    return res;
}

TreeStepResult tree_generate_step(const TransformerModel& target, const TransformerModel& draft,
                                  const ExitPredictor* predictor, const OfflineProfile* profile,
                                  const TreeEngineConfig& config, std::span<const TokenId> context)
{
    TreeEngine engine(target, draft, predictor, profile, config);
    engine.reset(context);
    return engine.step();
}

std::vector<TokenId> tree_generate(const TransformerModel& target, const TransformerModel& draft,
                                   const ExitPredictor* predictor, const OfflineProfile* profile,
                                   const TreeEngineConfig& config, std::span<const TokenId> prompt,
                                   std::size_t max_new, std::vector<TreeStepResult>* steps)
{
    TreeEngine engine(target, draft, predictor, profile, config);
    engine.reset(prompt);
    std::vector<TokenId> out;
    while (out.size() < max_new) {
        auto r = engine.step();
        for (auto t : r.committed())
            out.push_back(t);
        if (steps)
            steps->push_back(std::move(r));
    }
    out.resize(max_new);
    return out;
}

std::string format_tree_trace_record(const TreeStepResult& step, std::span<const std::size_t> branching)
{
    nlohmann::json j;
    j["branching"] = std::vector<std::size_t>(branching.begin(), branching.end());
    j["paths"] = step.num_paths;
    j["accepted"] = step.accepted_tokens.size();
    j["committed"] = step.committed();
    j["exit_layer"] = step.exit_layer;
    j["path_exit_layers"] = step.path_exit_layers;
    j["predictor_evaluations"] = step.predictor_evaluations;
    j["evaluation_bound"] = step.evaluation_bound();
    return j.dump();
}

}  // namespace specee
