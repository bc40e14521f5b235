#include "specee/binio.hpp"
#include "specee/engine.hpp"
#include "specee/harness.hpp"
#include "specee/predictor.hpp"
#include "specee/rng.hpp"
#include "specee/scheduler.hpp"
#include "specee/tree.hpp"
#include "specee/weights_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace specee;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
};

PipelineConfig load_config(const Common& c)
{
    auto cfg = c.config_path.empty() ? PipelineConfig::defaults() : load_pipeline_config(c.config_path);
    if (c.seed)
        override_seeds(cfg, *c.seed);
    return cfg;
}

void add_common(CLI::App* app, Common& c)
{
    app->add_option("--config", c.config_path, "Pipeline config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "Derive every stage seed from this value");
    app->add_option("--out", c.out_dir, "Artifact directory")->capture_default_str();
}

std::vector<TokenId> text_tokens(const std::string& text)
{
    std::vector<TokenId> out;
    for (unsigned char ch : text)
        out.push_back(ch);
    return out;
}

std::string printable(std::span<const TokenId> tokens)
{
    std::string s;
    for (auto t : tokens) {
        if (t == '\n' || (t >= 32 && t < 127)) {
            s += static_cast<char>(t);
        } else {
            char buf[8];
            std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned>(t));
            s += buf;
        }
    }
    return s;
}

struct Loaded {
    TransformerModel target, draft;
    std::optional<MlpExitPredictor> predictor;
    std::optional<OfflineProfile> profile;
};

Loaded load_artifacts(const fs::path& dir, bool need_predictor, bool need_profile)
{
    Loaded l;
    l.target = load_weights((dir / artifacts::target).string());
    l.draft = load_weights((dir / artifacts::draft).string());
    if (need_predictor) {
        if (!fs::exists(dir / artifacts::predictors))
            throw MissingArtifactError("missing artifact: " + (dir / artifacts::predictors).string());
        l.predictor.emplace(load_predictors((dir / artifacts::predictors).string()));
    }
    if (need_profile) {
        if (!fs::exists(dir / artifacts::profile))
            throw MissingArtifactError("missing artifact: " + (dir / artifacts::profile).string());
        l.profile = load_profile((dir / artifacts::profile).string(), model_fingerprint(l.target));
    }
    return l;
}

std::unique_ptr<std::ofstream> open_trace(const std::string& path)
{
    if (path.empty())
        return nullptr;
    auto f = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
    if (!*f)
        throw std::runtime_error("cannot write trace file " + path);
    return f;
}

void inspect(const std::string& path)
{
    const auto bytes = read_file(path);
    const std::string magic(bytes.data(), std::min<std::size_t>(4, bytes.size()));
    nlohmann::json j;
    j["file"] = path;
    j["bytes"] = bytes.size();
    j["fingerprint"] = fnv1a(bytes.data(), bytes.size());
    if (magic == "SPXW") {
        const auto m = deserialize_weights(bytes);
        const auto& c = m.config();
        j["kind"] = "weights";
        j["config"] = {{"vocab_size", c.vocab_size}, {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
                       {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},       {"max_context", c.max_context},
                       {"seed", c.seed}};
        j["parameters"] = m.parameter_count();
    } else if (magic == "SPXP") {
        const auto b = deserialize_predictors(bytes);
        j["kind"] = "predictors";
        j["k"] = b.k;
        j["hidden"] = b.hidden;
        std::vector<std::size_t> layers;
        for (const auto& [l, _] : b.by_layer)
            layers.push_back(l);
        j["layers"] = layers;
        const auto fp = predictor_param_count(b.k, b.hidden, layers.size());
        j["params_per_layer"] = fp.params_per_layer;
        j["kilobytes_fp16"] = fp.kilobytes;
    } else if (magic == "SPXS") {
        const auto p = deserialize_profile(bytes);
        j["kind"] = "profile";
        j["exit_counts"] = p.exit_counts;
        j["ranked_layers"] = p.ranked_layers;
        j["model_fingerprint"] = p.fingerprint;
    } else {
        throw FormatError("unrecognized file type: " + path);
    }
    std::cout << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Early-exit decoding with speculative search-space reduction"};
    app.require_subcommand(1);
    Common common;
    bool force = false;

    std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
    const std::pair<const char*, Stage> stage_list[] = {
        {"train-model", Stage::TrainModel},       {"train-draft", Stage::TrainDraft},
        {"train-predictors", Stage::TrainPredictors}, {"profile", Stage::Profile},
        {"bench", Stage::Bench}};
    for (const auto& [name, stage] : stage_list) {
        auto* cmd = app.add_subcommand(name, "Run the " + std::string(name) + " stage");
        add_common(cmd, common);
        cmd->add_flag("--force", force, "Run even if the manifest says it is up to date");
        stage_cmds.emplace_back(cmd, stage);
    }

    auto* pipeline = app.add_subcommand("pipeline", "Run every stage in order");
    add_common(pipeline, common);
    pipeline->add_flag("--force", force, "Re-run every stage");

    std::string prompt, trace_path, mode = "two-level", branching_arg = "2,2";
    std::size_t max_new = 32;
    bool oracle_mode = false, stale = false;

    auto* gen = app.add_subcommand("generate", "Early-exit generation from a prompt");
    add_common(gen, common);
    gen->add_option("--prompt", prompt, "Prompt text")->required();
    gen->add_option("--max-new", max_new, "Tokens to generate")->capture_default_str();
    gen->add_option("--mode", mode, "Layer schedule")
        ->check(CLI::IsMember({"all-layers", "two-level"}))
        ->capture_default_str();
    gen->add_flag("--oracle", oracle_mode, "Replace predictors with the exhaustive oracle");
    gen->add_flag("--stale-cache", stale, "Fill skipped caches from the exit hidden state");
    gen->add_option("--trace", trace_path, "Write one JSON record per token");

    auto* tgen = app.add_subcommand("tree-generate", "Tree speculative decoding with early exit");
    add_common(tgen, common);
    tgen->add_option("--prompt", prompt, "Prompt text")->required();
    tgen->add_option("--max-new", max_new, "Tokens to generate")->capture_default_str();
    tgen->add_option("--branching", branching_arg, "Children per depth, comma separated")->capture_default_str();
    tgen->add_option("--trace", trace_path, "Write one JSON record per tree step");

    auto* orc = app.add_subcommand("oracle", "Per-layer argmax and oracle exit layer of greedy decoding");
    add_common(orc, common);
    orc->add_option("--prompt", prompt, "Prompt text")->required();
    orc->add_option("--max-new", max_new, "Tokens to generate")->capture_default_str();

    std::string inspect_path;
    auto* ins = app.add_subcommand("inspect", "Describe a weight, predictor or profile file");
    add_common(ins, common);
    ins->add_option("file", inspect_path, "File to inspect")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path out_dir = common.out_dir;
        for (const auto& [cmd, stage] : stage_cmds) {
            if (!cmd->parsed())
                continue;
            const auto r = run_stage(load_config(common), out_dir, stage, force);
            std::cout << stage_name(stage) << ": " << (r.ran ? "done" : "up to date") << '\n';
            if (stage == Stage::Bench)
                {
                const auto report = read_file((out_dir / artifacts::report_txt).string());
                std::cout << std::string(report.begin(), report.end());
            }
        }
        if (pipeline->parsed()) {
            for (const auto& r : run_pipeline(load_config(common), out_dir, all_stages(), force))
                std::cout << stage_name(r.stage) << ": " << (r.ran ? "done" : "up to date") << '\n';
        }
        if (gen->parsed()) {
            const auto cfg = load_config(common);
            const bool two_level = mode == "two-level";
            const auto l = load_artifacts(out_dir, !oracle_mode, two_level);
            EngineConfig ec;
            ec.k = cfg.k;
            ec.threshold = cfg.threshold;
            ec.mode = two_level ? ScheduleMode::TwoLevel : ScheduleMode::AllLayers;
            ec.oracle = oracle_mode;
            ec.stale_cache = stale;
            ec.schedule = cfg.schedule;
            const auto p = text_tokens(prompt);
            const auto res = generate(l.target, l.draft, l.predictor ? &*l.predictor : nullptr,
                                      l.profile ? &*l.profile : nullptr, ec, p, max_new);
            if (auto trace = open_trace(trace_path))
                for (const auto& r : res.records)
                    *trace << format_trace_record(r) << '\n';
            double avg = 0;
            for (const auto& r : res.records)
                avg += static_cast<double>(r.exit_layer);
            std::cout << printable(res.tokens) << '\n';
            std::cerr << "tokens " << res.tokens.size() << ", average exit layer "
                      << avg / static_cast<double>(res.records.size()) << '\n';
        }
        if (tgen->parsed()) {
            const auto cfg = load_config(common);
            const auto l = load_artifacts(out_dir, true, true);
            TreeEngineConfig tc;
            tc.branching.clear();
            std::stringstream ss(branching_arg);
            for (std::string part; std::getline(ss, part, ',');)
                tc.branching.push_back(std::stoul(part));
            tc.k = cfg.k;
            tc.threshold = cfg.threshold;
            tc.mode = ScheduleMode::TwoLevel;
            tc.schedule = cfg.schedule;
            std::vector<TreeStepResult> steps;
            const auto out = tree_generate(l.target, l.draft, &*l.predictor, &*l.profile, tc, text_tokens(prompt),
                                           max_new, &steps);
            if (auto trace = open_trace(trace_path))
                for (const auto& s : steps)
                    *trace << format_tree_trace_record(s, tc.branching) << '\n';
            std::cout << printable(out) << '\n';
            std::cerr << "steps " << steps.size() << ", tokens per step "
                      << static_cast<double>(out.size()) / static_cast<double>(steps.size()) << '\n';
        }
        if (orc->parsed()) {
            const auto target = load_weights((out_dir / artifacts::target).string());
            auto ctx = text_tokens(prompt);
            for (std::size_t i = 0; i < max_new; ++i) {
                const auto rec = make_oracle_record(per_layer_argmax(target, ctx));
                nlohmann::json j{{"position", ctx.size()},
                                 {"token", rec.full_token()},
                                 {"oracle_exit_layer", rec.exit_layer},
                                 {"layer_argmax", rec.layer_argmax}};
                std::cout << j.dump() << '\n';
                ctx.push_back(rec.full_token());
            }
        }
        if (ins->parsed())
            inspect(inspect_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
