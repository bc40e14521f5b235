#include "specee/engine.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace specee {

float MlpExitPredictor::exit_probability(std::size_t layer, const FeatureVector& features) const
{
    const auto it = bank_.by_layer.find(layer);
    if (it == bank_.by_layer.end())
        throw std::runtime_error("no predictor for layer " + std::to_string(layer));
    return predictor_forward(it->second, features);
}

std::optional<TokenId> verify_exit(const TransformerModel& model, std::span<const float> hidden,
                                   const SpeculativeSet& spec)
{
    const auto token = static_cast<TokenId>(argmax(full_head_logits(model, hidden)));
    if (spec.contains(token))
        return token;
    return std::nullopt;
}

std::vector<TokenId> per_layer_argmax(const TransformerModel& target, std::span<const TokenId> context)
{
    std::vector<TokenId> out;
    for (const auto& h : per_layer_last_hidden(target, context))
        out.push_back(static_cast<TokenId>(argmax(full_head_logits(target, h))));
    return out;
}

std::size_t oracle_exit_layer(const TransformerModel& target, std::span<const TokenId> context)
{
    const auto am = per_layer_argmax(target, context);
    for (std::size_t l = 0; l < am.size(); ++l)
        if (am[l] == am.back())
            return l;
    return am.size() - 1;
}

// ---------------------------------------------------------------------------

ExitEngine::ExitEngine(const TransformerModel& target, const TransformerModel& draft, const ExitPredictor* predictor,
                       const OfflineProfile* profile, EngineConfig config)
    : target_(target),
      predictor_(predictor),
      profile_(profile),
      config_(config),
      drafter_(draft),
      online_(target.config().num_layers, config.schedule.queue_length, config.schedule.radius)
{
    const std::size_t layers = target.config().num_layers;
    if (draft.config().vocab_size != target.config().vocab_size)
        throw std::invalid_argument("draft and target vocabularies differ");
    if (config_.k < 1 || config_.k > target.config().vocab_size)
        throw std::invalid_argument("k must be in [1, vocab_size]");
    config_.schedule.validate(layers);
    if (!config_.oracle && !predictor_)
        throw std::invalid_argument("engine needs a predictor unless in oracle mode");
    if (config_.mode == ScheduleMode::TwoLevel) {
        if (!profile_)
            throw std::invalid_argument("two-level scheduling needs an offline profile");
        if (profile_->num_layers() != layers)
            throw std::invalid_argument("offline profile was built for a different layer count");
    }
    if (const auto* mlp = dynamic_cast<const MlpExitPredictor*>(predictor_); mlp && mlp->bank().k != config_.k)
        throw std::invalid_argument("predictor bank k does not match engine k");
}

void ExitEngine::reset(std::span<const TokenId> prompt)
{
    if (prompt.empty())
        throw std::invalid_argument("empty prompt");
    if (state_)
        retired_layer_evaluations_ += state_->layer_evaluations();
    context_.assign(prompt.begin(), prompt.end());
    state_.emplace(target_);
    state_->set_stale_cache(config_.stale_cache);
    for (auto t : context_)
        state_->begin_token(t);
    if (config_.oracle) {
        reference_.emplace(target_);
        for (auto t : context_)
            reference_->begin_token(t);
    }
    online_ = OnlineState(target_.config().num_layers, config_.schedule.queue_length, config_.schedule.radius);
}

std::uint64_t ExitEngine::layer_evaluations() const
{
    return retired_layer_evaluations_ + (state_ ? state_->layer_evaluations() : 0);
}

std::vector<std::size_t> ExitEngine::scheduled_layers() const
{
    if (config_.mode == ScheduleMode::TwoLevel)
        return active_layers(*profile_, online_, config_.schedule);
    std::vector<std::size_t> all(target_.config().num_layers - 1);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
}

ExitRecord ExitEngine::generate_token()
{
    if (!state_)
        throw std::logic_error("generate_token before reset");
    if (context_.size() >= target_.config().max_context)
        throw std::length_error("context is full");
    const std::size_t last = target_.config().num_layers - 1;

    std::optional<TokenId> reference;
    if (config_.oracle) {
        const auto h = reference_->forward_to_layer(last);
        reference = static_cast<TokenId>(argmax(full_head_logits(target_, h)));
    }

    const auto spec = drafter_.propose(context_, config_.k);
    ExitRecord rec;
    rec.active_layers = scheduled_layers();
    rec.online_layers = online_layers(online_);
    counters_.active_layer_total += rec.active_layers.size();
    std::vector<bool> active(last + 1, false);
    for (auto l : rec.active_layers)
        active[l] = true;

    auto prev = uniform_probs(config_.k);
    std::optional<TokenId> emitted;
    for (std::size_t l = 0; l <= last && !emitted; ++l) {
        const auto h = state_->run_layer(l);
        if (l == last || !active[l])
            continue;
        if (!config_.oracle && !predictor_->has_layer(l))
            throw std::runtime_error("missing predictor for active layer " + std::to_string(l));
        const auto logits = sliced_head_logits(target_, h, spec.tokens);
        ++counters_.sliced_head_projections;
        const auto features = extract_features(logits, prev);
        prev = features.local_probs;
        bool fire;
        if (config_.oracle) {
            fire = argmax(full_head_logits(target_, h)) == *reference;
        } else {
            fire = decide_exit(predictor_->exit_probability(l, features), config_.threshold);
            ++counters_.predictor_evaluations;
        }
        rec.evaluations.push_back({l, fire});
        if (!fire)
            continue;
        ++counters_.predictor_positives;
        rec.predictor_fired = true;
        ++counters_.full_head_projections;
        ++rec.full_head_projections;
        if (const auto tok = verify_exit(target_, h, spec)) {
            emitted = tok;
            rec.exit_layer = l;
            rec.verified = true;
            ++counters_.verified_exits;
            state_->freeze_current();
        }
    }
    if (!emitted) {
        emitted = static_cast<TokenId>(argmax(full_head_logits(target_, state_->current_hidden())));
        rec.exit_layer = last;
        ++counters_.full_head_projections;
        ++rec.full_head_projections;
    }
    rec.token = *emitted;
    ++counters_.tokens;
    online_.update(rec.exit_layer);

    context_.push_back(rec.token);
    if (context_.size() < target_.config().max_context) {
        state_->begin_token(rec.token);
        if (reference_)
            reference_->begin_token(rec.token);
    }
    return rec;
}

GenerationResult generate(const TransformerModel& target, const TransformerModel& draft,
                          const ExitPredictor* predictor, const OfflineProfile* profile, const EngineConfig& config,
                          std::span<const TokenId> prompt, std::size_t max_new)
{
    if (max_new < 1)
        throw std::invalid_argument("max_new must be >= 1");
    if (prompt.size() + max_new > target.config().max_context)
        throw std::length_error("prompt + max_new exceeds max_context");
    ExitEngine engine(target, draft, predictor, profile, config);
    engine.reset(prompt);
    GenerationResult out;
    for (std::size_t i = 0; i < max_new; ++i) {
        auto rec = engine.generate_token();
        out.tokens.push_back(rec.token);
        out.records.push_back(std::move(rec));
    }
    return out;
}

std::vector<TokenId> greedy_generate(const TransformerModel& target, std::span<const TokenId> prompt,
                                     std::size_t max_new)
{
    if (prompt.empty())
        throw std::invalid_argument("empty prompt");
    DecodeState state(target);
    for (auto t : prompt)
        state.begin_token(t);
    std::vector<TokenId> out;
    const std::size_t last = target.config().num_layers - 1;
    for (std::size_t i = 0; i < max_new; ++i) {
        const auto h = state.forward_to_layer(last);
        out.push_back(static_cast<TokenId>(argmax(full_head_logits(target, h))));
        if (i + 1 < max_new)
            state.begin_token(out.back());
    }
    return out;
}

std::vector<std::vector<TokenId>> make_prompts(std::span<const TokenId> corpus, const PromptPlan& plan)
{
    if (plan.prompt_len < 1 || plan.stride < 1)
        throw std::invalid_argument("prompt_len and stride must be positive");
    std::vector<std::vector<TokenId>> out;
    for (std::size_t s = 0; s + plan.prompt_len <= corpus.size(); s += plan.stride) {
        if (plan.max_segments && out.size() == plan.max_segments)
            break;
        out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(s),
                         corpus.begin() + static_cast<std::ptrdiff_t>(s + plan.prompt_len));
    }
    return out;
}

OfflineProfile profile_offline(const TransformerModel& target, const TransformerModel& draft,
                               const ExitPredictor& predictor, std::span<const TokenId> corpus,
                               const PromptPlan& plan, const EngineConfig& config, std::uint64_t fingerprint)
{
    const auto prompts = make_prompts(corpus, plan);
    if (prompts.empty())
        throw std::invalid_argument("corpus too small for a single prompt");
    EngineConfig all = config;
    all.mode = ScheduleMode::AllLayers;
    all.oracle = false;
    ExitEngine engine(target, draft, &predictor, nullptr, all);
    std::vector<std::uint64_t> counts(target.config().num_layers, 0);
    for (const auto& prompt : prompts) {
        engine.reset(prompt);
        for (std::size_t i = 0; i < plan.max_new; ++i) {
            const auto rec = engine.generate_token();
            if (rec.verified)
                ++counts[rec.exit_layer];
        }
    }
    return OfflineProfile::from_counts(std::move(counts), fingerprint);
}

std::string format_trace_record(const ExitRecord& record)
{
    nlohmann::json j;
    j["token"] = record.token;
    j["exit_layer"] = record.exit_layer;
    j["predictor_fired"] = record.predictor_fired;
    j["verified"] = record.verified;
    j["active_layers"] = record.active_layers;
    return j.dump();
}

}  // namespace specee
