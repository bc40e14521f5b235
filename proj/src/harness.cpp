#include "specee/harness.hpp"

#include "specee/binio.hpp"
#include "specee/rng.hpp"
#include "specee/weights_io.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace specee {

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where)
{
    if (!j.is_object())
        throw std::invalid_argument(where + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

void read_model(const json& j, ModelConfig& m, const std::string& where)
{
    check_keys(j, {"vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_context", "seed"}, where);
    read(j, "vocab_size", m.vocab_size);
    read(j, "hidden_dim", m.hidden_dim);
    read(j, "num_layers", m.num_layers);
    read(j, "num_heads", m.num_heads);
    read(j, "ffn_dim", m.ffn_dim);
    read(j, "max_context", m.max_context);
    read(j, "seed", m.seed);
    m.validate();
}

void read_train(const json& j, TrainConfig& t, const std::string& where)
{
    check_keys(j, {"seq_len", "batch_size", "epochs", "learning_rate", "max_batches_per_epoch", "grad_clip", "seed"},
               where);
    read(j, "seq_len", t.seq_len);
    read(j, "batch_size", t.batch_size);
    read(j, "epochs", t.epochs);
    read(j, "learning_rate", t.learning_rate);
    read(j, "max_batches_per_epoch", t.max_batches_per_epoch);
    read(j, "grad_clip", t.grad_clip);
    read(j, "seed", t.seed);
}

void read_stage(const json& j, ModelStageConfig& s, const std::string& where)
{
    check_keys(j, {"model", "train"}, where);
    if (j.contains("model"))
        read_model(j.at("model"), s.model, where + ".model");
    if (j.contains("train"))
        read_train(j.at("train"), s.train, where + ".train");
}

void read_plan(const json& j, PromptPlan& p)
{
    read(j, "prompt_len", p.prompt_len);
    read(j, "max_new", p.max_new);
    read(j, "stride", p.stride);
    read(j, "max_segments", p.max_segments);
}

json model_json(const ModelConfig& m)
{
    return {{"vocab_size", m.vocab_size}, {"hidden_dim", m.hidden_dim}, {"num_layers", m.num_layers},
            {"num_heads", m.num_heads},   {"ffn_dim", m.ffn_dim},       {"max_context", m.max_context},
            {"seed", m.seed}};
}

json train_json(const TrainConfig& t)
{
    return {{"seq_len", t.seq_len},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"learning_rate", t.learning_rate},
            {"max_batches_per_epoch", t.max_batches_per_epoch},
            {"grad_clip", t.grad_clip},
            {"seed", t.seed}};
}

json plan_json(const PromptPlan& p)
{
    return {{"prompt_len", p.prompt_len}, {"max_new", p.max_new}, {"stride", p.stride},
            {"max_segments", p.max_segments}};
}

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t hash_string(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL)
{
    return fnv1a(s.data(), s.size(), h);
}

// Manifest: per stage, the input fingerprint and the hash of every output.
class Manifest {
public:
    explicit Manifest(fs::path path) : path_(std::move(path))
    {
        if (fs::exists(path_)) {
            std::ifstream in(path_);
            try {
                data_ = json::parse(in);
            } catch (const json::exception& e) {
                throw FormatError("corrupt manifest " + path_.string() + ": " + e.what());
            }
        }
        if (!data_.is_object())
            data_ = json::object();
    }

    const json* stage(const std::string& name) const
    {
        const auto it = data_.find(name);
        return it == data_.end() ? nullptr : &*it;
    }

    // Hash recorded for an artifact by whichever stage produced it.
    std::optional<std::string> recorded(const std::string& artifact) const
    {
        for (const auto& [_, entry] : data_.items())
            if (entry.contains("outputs") && entry["outputs"].contains(artifact))
                return entry["outputs"][artifact].get<std::string>();
        return std::nullopt;
    }

    void set(const std::string& name, const std::string& input, const json& outputs)
    {
        data_[name] = {{"input", input}, {"outputs", outputs}};
        std::ofstream out(path_, std::ios::binary | std::ios::trunc);
        if (!out)
            throw std::runtime_error("cannot write " + path_.string());
        out << data_.dump(2) << '\n';
    }

private:
    fs::path path_;
    json data_;
};

struct StageIo {
    std::vector<std::string> upstream;  // artifacts in out_dir
    std::vector<std::string> outputs;
    json config;
    std::vector<fs::path> inputs;  // external data files
};

StageIo stage_io(const PipelineConfig& c, Stage stage)
{
    switch (stage) {
    case Stage::TrainModel:
        return {{}, {artifacts::target}, {{"target", pipeline_config_to_json(c)["target"]}}, {c.resolve(c.corpus)}};
    case Stage::TrainDraft:
        return {{}, {artifacts::draft}, {{"draft", pipeline_config_to_json(c)["draft"]}}, {c.resolve(c.corpus)}};
    case Stage::TrainPredictors:
        return {{artifacts::target, artifacts::draft},
                {artifacts::predictors},
                {{"predictor", pipeline_config_to_json(c)["predictor"]}},
                {c.resolve(c.corpus)}};
    case Stage::Profile: {
        const auto j = pipeline_config_to_json(c);
        return {{artifacts::target, artifacts::draft, artifacts::predictors},
                {artifacts::profile},
                {{"profile", j["profile"]}, {"predictor", j["predictor"]}},
                {c.resolve(c.corpus)}};
    }
    case Stage::Bench: {
        const auto j = pipeline_config_to_json(c);
        StageIo io{{artifacts::target, artifacts::draft, artifacts::predictors, artifacts::profile},
                   {artifacts::report_txt, artifacts::report_jsonl},
                   {{"bench", j["bench"]}, {"profile", j["profile"]}, {"predictor", j["predictor"]}},
                   {}};
        for (const auto& d : c.bench.datasets)
            io.inputs.push_back(c.resolve(d.path));
        return io;
    }
    }
    throw std::logic_error("unknown stage");
}

std::string input_fingerprint(const StageIo& io, const fs::path& out_dir)
{
    std::uint64_t h = hash_string(io.config.dump());
    for (const auto& a : io.upstream)
        h = hash_string(a + "=" + hex64(file_fingerprint(out_dir / a)), h);
    for (const auto& p : io.inputs)
        h = hash_string(hex64(file_fingerprint(p)), h);
    return hex64(h);
}

void write_text(const fs::path& path, const std::string& text)
{
    write_file(path.string(), std::span<const char>(text.data(), text.size()));
}

void do_train_model(const ModelStageConfig& s, const std::vector<TokenId>& corpus, const fs::path& out)
{
    auto model = init_model(s.model);
    train_language_model(model, corpus, s.train);
    save_weights(model, out.string());
}

void do_train_predictors(const PipelineConfig& c, const fs::path& dir, const std::vector<TokenId>& corpus)
{
    const auto target = load_weights((dir / artifacts::target).string());
    const auto draft = load_weights((dir / artifacts::draft).string());
    std::vector<std::size_t> layers(target.config().num_layers - 1);
    std::iota(layers.begin(), layers.end(), std::size_t{0});
    auto collect = c.collect;
    collect.k = c.k;
    const auto data = collect_training_data(target, draft, corpus, layers, collect);
    PredictorBank bank;
    bank.k = c.k;
    bank.hidden = c.predictor.hidden;
    auto pc = c.predictor;
    pc.threshold = c.threshold;
    for (auto l : layers) {
        pc.seed = c.predictor.seed + l;
        bank.by_layer[l] = train_predictor(data.for_layer(l), pc).weights;
    }
    save_predictors(bank, (dir / artifacts::predictors).string());
}

EngineConfig engine_config(const PipelineConfig& c, ScheduleMode mode)
{
    EngineConfig e;
    e.k = c.k;
    e.threshold = c.threshold;
    e.mode = mode;
    e.schedule = c.schedule;
    return e;
}

void do_profile(const PipelineConfig& c, const fs::path& dir, const std::vector<TokenId>& corpus)
{
    const auto target = load_weights((dir / artifacts::target).string());
    const auto draft = load_weights((dir / artifacts::draft).string());
    const MlpExitPredictor predictor(load_predictors((dir / artifacts::predictors).string()));
    const auto profile = profile_offline(target, draft, predictor, corpus, c.profile,
                                         engine_config(c, ScheduleMode::AllLayers),
                                         file_fingerprint(dir / artifacts::target));
    save_profile(profile, (dir / artifacts::profile).string());
}

void do_bench(const PipelineConfig& c, const fs::path& dir)
{
    const auto target = load_weights((dir / artifacts::target).string());
    const auto draft = load_weights((dir / artifacts::draft).string());
    const MlpExitPredictor predictor(load_predictors((dir / artifacts::predictors).string()));
    const auto profile = load_profile((dir / artifacts::profile).string(), file_fingerprint(dir / artifacts::target));

    std::vector<BenchReport> rows;
    std::vector<TreeBenchReport> tree_rows;
    json timing = json::array();
    for (const auto& ds : c.bench.datasets) {
        const auto tokens = load_corpus(c.resolve(ds.path));
        const auto prompts = make_prompts(tokens, c.bench.prompts);
        if (prompts.empty())
            throw std::invalid_argument("dataset " + ds.name + " is too small for one prompt");
        for (auto mode : {ScheduleMode::AllLayers, ScheduleMode::TwoLevel}) {
            auto run = bench_engine(target, draft, &predictor, &profile, engine_config(c, mode), prompts,
                                    c.bench.prompts.max_new);
            run.report.dataset = ds.name;
            timing.push_back({{"dataset", ds.name},
                              {"mode", run.report.mode},
                              {"seconds", run.seconds},
                              {"tokens_per_sec", run.seconds > 0 ? run.report.tokens / run.seconds : 0.0}});
            rows.push_back(std::move(run.report));
        }
        if (!c.bench.tree_branching.empty()) {
            TreeEngineConfig tc;
            tc.branching = c.bench.tree_branching;
            tc.k = c.k;
            tc.threshold = c.threshold;
            tc.mode = ScheduleMode::TwoLevel;
            tc.schedule = c.schedule;
            double seconds = 0;
            auto tr = bench_tree(target, draft, &predictor, &profile, tc, prompts, c.bench.prompts.max_new, &seconds);
            tr.dataset = ds.name;
            timing.push_back({{"dataset", ds.name},
                              {"mode", "tree"},
                              {"seconds", seconds},
                              {"tokens_per_sec", seconds > 0 ? tr.committed_tokens / seconds : 0.0}});
            tree_rows.push_back(std::move(tr));
        }
    }
    write_text(dir / artifacts::report_txt, format_report_text(rows, tree_rows));
    write_text(dir / artifacts::report_jsonl, format_report_jsonl(rows, tree_rows));
    std::string t;
    for (const auto& row : timing)
        t += row.dump() + "\n";
    write_text(dir / artifacts::timing, t);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::defaults()
{
    PipelineConfig c;
    c.target.train.batch_size = 1;
    c.target.train.epochs = 5;
    c.target.train.learning_rate = 0.3f;
    c.target.train.seed = 11;
    c.draft.train = c.target.train;
    c.draft.train.seed = 12;
    c.collect.max_segments = 256;
    c.predictor.epochs = 20;
    c.bench.datasets = {{"corpus", "data/corpus.txt"}, {"heldout", "data/heldout.txt"}};
    return c;
}

fs::path PipelineConfig::resolve(const std::string& path) const
{
    const fs::path p(path);
    return p.is_absolute() ? p : base_dir / p;
}

PipelineConfig parse_pipeline_config(const json& j, const fs::path& base_dir)
{
    auto c = PipelineConfig::defaults();
    c.base_dir = base_dir;
    try {
        check_keys(j, {"corpus", "target", "draft", "predictor", "profile", "bench"}, "config");
        read(j, "corpus", c.corpus);
        if (j.contains("target"))
            read_stage(j.at("target"), c.target, "target");
        if (j.contains("draft"))
            read_stage(j.at("draft"), c.draft, "draft");
        if (j.contains("predictor")) {
            const auto& p = j.at("predictor");
            check_keys(p,
                       {"k", "threshold", "hidden", "epochs", "batch_size", "learning_rate", "class_balance", "seed",
                        "collect"},
                       "predictor");
            read(p, "k", c.k);
            read(p, "threshold", c.threshold);
            read(p, "hidden", c.predictor.hidden);
            read(p, "epochs", c.predictor.epochs);
            read(p, "batch_size", c.predictor.batch_size);
            read(p, "learning_rate", c.predictor.learning_rate);
            read(p, "class_balance", c.predictor.class_balance);
            read(p, "seed", c.predictor.seed);
            if (p.contains("collect")) {
                const auto& cc = p.at("collect");
                check_keys(cc, {"prompt_len", "max_new", "stride", "max_segments"}, "predictor.collect");
                read(cc, "prompt_len", c.collect.prompt_len);
                read(cc, "max_new", c.collect.max_new);
                read(cc, "stride", c.collect.stride);
                read(cc, "max_segments", c.collect.max_segments);
            }
        }
        if (j.contains("profile")) {
            const auto& p = j.at("profile");
            check_keys(p, {"prompt_len", "max_new", "stride", "max_segments", "queue_length", "radius", "offline_top_k"},
                       "profile");
            read_plan(p, c.profile);
            read(p, "queue_length", c.schedule.queue_length);
            read(p, "radius", c.schedule.radius);
            read(p, "offline_top_k", c.schedule.offline_top_k);
        }
        if (j.contains("bench")) {
            const auto& b = j.at("bench");
            check_keys(b, {"datasets", "prompt_len", "max_new", "stride", "max_segments", "tree_branching"}, "bench");
            read_plan(b, c.bench.prompts);
            read(b, "tree_branching", c.bench.tree_branching);
            if (b.contains("datasets")) {
                c.bench.datasets.clear();
                for (const auto& d : b.at("datasets")) {
                    check_keys(d, {"name", "path"}, "bench.datasets[]");
                    c.bench.datasets.push_back({d.at("name").get<std::string>(), d.at("path").get<std::string>()});
                }
            }
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("bad config value: ") + e.what());
    }
    if (c.target.model.vocab_size != c.draft.model.vocab_size)
        throw std::invalid_argument("target and draft vocab sizes differ");
    if (c.k < 1 || c.k > c.target.model.vocab_size)
        throw std::invalid_argument("predictor.k must be in [1, vocab_size]");
    c.schedule.validate(c.target.model.num_layers);
    return c;
}

PipelineConfig load_pipeline_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::invalid_argument("config " + path + " is not valid JSON: " + e.what());
    }
    return parse_pipeline_config(j, fs::path(path).parent_path());
}

json pipeline_config_to_json(const PipelineConfig& c)
{
    json datasets = json::array();
    for (const auto& d : c.bench.datasets)
        datasets.push_back({{"name", d.name}, {"path", d.path}});
    auto profile = plan_json(c.profile);
    profile["queue_length"] = c.schedule.queue_length;
    profile["radius"] = c.schedule.radius;
    profile["offline_top_k"] = c.schedule.offline_top_k;
    auto bench = plan_json(c.bench.prompts);
    bench["datasets"] = datasets;
    bench["tree_branching"] = c.bench.tree_branching;
    return {{"corpus", c.corpus},
            {"target", {{"model", model_json(c.target.model)}, {"train", train_json(c.target.train)}}},
            {"draft", {{"model", model_json(c.draft.model)}, {"train", train_json(c.draft.train)}}},
            {"predictor",
             {{"k", c.k},
              {"threshold", c.threshold},
              {"hidden", c.predictor.hidden},
              {"epochs", c.predictor.epochs},
              {"batch_size", c.predictor.batch_size},
              {"learning_rate", c.predictor.learning_rate},
              {"class_balance", c.predictor.class_balance},
              {"seed", c.predictor.seed},
              {"collect",
               {{"prompt_len", c.collect.prompt_len},
                {"max_new", c.collect.max_new},
                {"stride", c.collect.stride},
                {"max_segments", c.collect.max_segments}}}}},
            {"profile", profile},
            {"bench", bench}};
}

void override_seeds(PipelineConfig& c, std::uint64_t seed)
{
    SplitMix64 rng(seed);
    c.target.model.seed = rng.next();
    c.target.train.seed = rng.next();
    c.draft.model.seed = rng.next();
    c.draft.train.seed = rng.next();
    c.predictor.seed = rng.next();
}

// ---------------------------------------------------------------------------
// Stages

const std::vector<Stage>& all_stages()
{
    static const std::vector<Stage> stages{Stage::TrainModel, Stage::TrainDraft, Stage::TrainPredictors,
                                           Stage::Profile, Stage::Bench};
    return stages;
}

std::string stage_name(Stage stage)
{
    switch (stage) {
    case Stage::TrainModel: return "train-model";
    case Stage::TrainDraft: return "train-draft";
    case Stage::TrainPredictors: return "train-predictors";
    case Stage::Profile: return "profile";
    case Stage::Bench: return "bench";
    }
    throw std::logic_error("unknown stage");
}

Stage parse_stage(const std::string& name)
{
    for (auto s : all_stages())
        if (stage_name(s) == name)
            return s;
    throw std::invalid_argument("unknown stage '" + name + "'");
}

std::uint64_t file_fingerprint(const fs::path& path)
{
    if (!fs::exists(path))
        throw MissingArtifactError("missing artifact: " + path.string());
    const auto bytes = read_file(path.string());
    return fnv1a(bytes.data(), bytes.size());
}

std::vector<TokenId> load_corpus(const fs::path& path)
{
    if (!fs::exists(path))
        throw MissingArtifactError("missing corpus: " + path.string());
    const auto bytes = read_file(path.string());
    return bytes_to_tokens(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

StageOutcome run_stage(const PipelineConfig& config, const fs::path& out_dir, Stage stage, bool force)
{
    fs::create_directories(out_dir);
    Manifest manifest(out_dir / artifacts::manifest);
    const auto io = stage_io(config, stage);
    const auto name = stage_name(stage);

    for (const auto& a : io.upstream) {
        const auto actual = hex64(file_fingerprint(out_dir / a));
        if (const auto rec = manifest.recorded(a); rec && *rec != actual)
            throw FingerprintMismatchError("artifact " + a + " changed since it was produced (expected " + *rec +
                                           ", found " + actual + ")");
    }
    const auto input = input_fingerprint(io, out_dir);

    if (!force) {
        if (const auto* entry = manifest.stage(name); entry && entry->value("input", "") == input) {
            bool intact = true;
            for (const auto& o : io.outputs) {
                const auto p = out_dir / o;
                intact = intact && fs::exists(p) && entry->contains("outputs") && (*entry)["outputs"].contains(o) &&
                         (*entry)["outputs"][o].get<std::string>() == hex64(file_fingerprint(p));
            }
            if (intact)
                return {stage, false};
        }
    }

    switch (stage) {
    case Stage::TrainModel:
        do_train_model(config.target, load_corpus(config.resolve(config.corpus)), out_dir / artifacts::target);
        break;
    case Stage::TrainDraft:
        do_train_model(config.draft, load_corpus(config.resolve(config.corpus)), out_dir / artifacts::draft);
        break;
    case Stage::TrainPredictors:
        do_train_predictors(config, out_dir, load_corpus(config.resolve(config.corpus)));
        break;
    case Stage::Profile:
        do_profile(config, out_dir, load_corpus(config.resolve(config.corpus)));
        break;
    case Stage::Bench:
        do_bench(config, out_dir);
        break;
    }

    json outputs = json::object();
    for (const auto& o : io.outputs)
        outputs[o] = hex64(file_fingerprint(out_dir / o));
    manifest.set(name, input, outputs);
    return {stage, true};
}

std::vector<StageOutcome> run_pipeline(const PipelineConfig& config, const fs::path& out_dir,
                                       const std::vector<Stage>& stages, bool force)
{
    std::vector<StageOutcome> out;
    for (auto s : all_stages())
        if (std::find(stages.begin(), stages.end(), s) != stages.end())
            out.push_back(run_stage(config, out_dir, s, force));
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

OracleRecord make_oracle_record(std::vector<TokenId> layer_argmax)
{
    if (layer_argmax.empty())
        throw std::invalid_argument("empty per-layer argmax list");
    OracleRecord r;
    r.layer_argmax = std::move(layer_argmax);
    r.exit_layer = r.layer_argmax.size() - 1;
    for (std::size_t l = 0; l < r.layer_argmax.size(); ++l)
        if (r.layer_argmax[l] == r.layer_argmax.back()) {
            r.exit_layer = l;
            break;
        }
    return r;
}

double LayerConfusion::precision() const
{
    return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
}

double LayerConfusion::recall() const
{
    return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
}

BenchReport compute_metrics(std::span<const ExitRecord> trace, std::span<const OracleRecord> oracle,
                            std::size_t num_layers)
{
    if (trace.size() != oracle.size())
        throw std::invalid_argument("trace and oracle lengths differ");
    if (num_layers < 1)
        throw std::invalid_argument("num_layers must be >= 1");
    BenchReport r;
    r.num_layers = num_layers;
    r.tokens = trace.size();
    r.confusion.resize(num_layers - 1);
    if (trace.empty())
        return r;
    double exit_sum = 0, oracle_sum = 0, agree = 0, active = 0, hits = 0, base = 0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto& t = trace[i];
        const auto& o = oracle[i];
        if (o.layer_argmax.size() != num_layers)
            throw std::invalid_argument("oracle record has the wrong layer count");
        if (t.exit_layer >= num_layers)
            throw std::invalid_argument("exit layer out of range");
        exit_sum += static_cast<double>(t.exit_layer);
        oracle_sum += static_cast<double>(o.exit_layer);
        agree += t.token == o.full_token() ? 1.0 : 0.0;
        active += static_cast<double>(t.active_layers.size());
        r.verified_exits += t.verified ? 1 : 0;
        for (const auto& e : t.evaluations) {
            if (e.layer + 1 >= num_layers)
                throw std::invalid_argument("evaluation layer out of range");
            const bool label = o.layer_argmax[e.layer] == o.full_token();
            auto& c = r.confusion[e.layer];
            if (e.fired)
                ++(label ? c.tp : c.fp);
            else
                ++(label ? c.fn : c.tn);
            ++r.predictor_evaluations;
        }
        hits += std::find(t.online_layers.begin(), t.online_layers.end(), o.exit_layer) != t.online_layers.end();
        base += static_cast<double>(t.online_layers.size()) / static_cast<double>(num_layers);
    }
    const double n = static_cast<double>(trace.size());
    r.avg_exit_layer = exit_sum / n;
    r.oracle_avg_exit_layer = oracle_sum / n;
    r.agreement = agree / n;
    r.active_layer_avg = active / n;
    r.online_hit_rate = hits / n;
    r.online_base_rate = base / n;
    return r;
}

namespace {

std::vector<TokenId> reference_argmax(const TransformerModel& target, DecodeState& ref)
{
    std::vector<TokenId> am;
    for (std::size_t l = 0; l < target.config().num_layers; ++l)
        am.push_back(static_cast<TokenId>(argmax(full_head_logits(target, ref.run_layer(l)))));
    return am;
}

}  // namespace

BenchRun bench_engine(const TransformerModel& target, const TransformerModel& draft, const ExitPredictor* predictor,
                      const OfflineProfile* profile, const EngineConfig& config,
                      std::span<const std::vector<TokenId>> prompts, std::size_t max_new)
{
    BenchRun run;
    ExitEngine engine(target, draft, predictor, profile, config);
    std::chrono::duration<double> elapsed{0};
    for (const auto& prompt : prompts) {
        if (prompt.size() + max_new > target.config().max_context)
            throw std::length_error("prompt + max_new exceeds max_context");
        engine.reset(prompt);
        DecodeState ref(target);
        for (auto t : prompt)
            ref.begin_token(t);
        for (std::size_t i = 0; i < max_new; ++i) {
            run.oracle.push_back(make_oracle_record(reference_argmax(target, ref)));
            const auto start = std::chrono::steady_clock::now();
            run.trace.push_back(engine.generate_token());
            elapsed += std::chrono::steady_clock::now() - start;
            if (i + 1 < max_new)
                ref.begin_token(run.trace.back().token);
        }
    }
    run.report = compute_metrics(run.trace, run.oracle, target.config().num_layers);
    run.report.mode = config.oracle ? "oracle" : config.mode == ScheduleMode::TwoLevel ? "two-level" : "all-layers";
    run.seconds = elapsed.count();
    return run;
}

TreeBenchReport bench_tree(const TransformerModel& target, const TransformerModel& draft,
                           const ExitPredictor* predictor, const OfflineProfile* profile,
                           const TreeEngineConfig& config, std::span<const std::vector<TokenId>> prompts,
                           std::size_t max_new, double* seconds)
{
    TreeBenchReport r;
    r.branching = config.branching;
    TreeEngine engine(target, draft, predictor, profile, config);
    std::chrono::duration<double> elapsed{0};
    double exit_sum = 0, agree = 0;
    const std::size_t last = target.config().num_layers - 1;
    for (const auto& prompt : prompts) {
        engine.reset(prompt);
        DecodeState ref(target);
        for (auto t : prompt)
            ref.begin_token(t);
        std::size_t produced = 0;
        while (produced < max_new) {
            const auto start = std::chrono::steady_clock::now();
            const auto step = engine.step();
            elapsed += std::chrono::steady_clock::now() - start;
            ++r.steps;
            exit_sum += static_cast<double>(step.exit_layer);
            r.predictor_evaluations += step.predictor_evaluations;
            r.evaluation_bound += step.evaluation_bound();
            for (auto t : step.committed()) {
                const auto full = static_cast<TokenId>(argmax(full_head_logits(target, ref.forward_to_layer(last))));
                agree += t == full ? 1.0 : 0.0;
                ref.begin_token(t);
                ++r.committed_tokens;
                ++produced;
            }
        }
    }
    if (r.steps) {
        r.avg_committed_per_step = static_cast<double>(r.committed_tokens) / static_cast<double>(r.steps);
        r.avg_exit_layer = exit_sum / static_cast<double>(r.steps);
        r.agreement = agree / static_cast<double>(r.committed_tokens);
    }
    if (seconds)
        *seconds = elapsed.count();
    return r;
}

std::string format_report_text(std::span<const BenchReport> rows, std::span<const TreeBenchReport> tree_rows)
{
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    out << "dataset     mode        tokens  avg_exit  oracle_avg  agreement  active_avg  online_hit  online_base"
           "  ratio\n";
    for (const auto& r : rows) {
        out << std::left << std::setw(12) << r.dataset << std::setw(12) << r.mode << std::right << std::setw(6)
            << r.tokens << std::setw(10) << r.avg_exit_layer << std::setw(12) << r.oracle_avg_exit_layer
            << std::setw(11) << r.agreement << std::setw(12) << r.active_layer_avg << std::setw(12)
            << r.online_hit_rate << std::setw(13) << r.online_base_rate << std::setw(7) << r.online_ratio() << '\n';
    }
    for (const auto& r : rows) {
        out << "\npredictor confusion (" << r.dataset << ", " << r.mode << ")\n";
        out << "layer      tp      fp      tn      fn  precision  recall\n";
        for (std::size_t l = 0; l < r.confusion.size(); ++l) {
            const auto& c = r.confusion[l];
            out << std::setw(5) << l << std::setw(8) << c.tp << std::setw(8) << c.fp << std::setw(8) << c.tn
                << std::setw(8) << c.fn << std::setw(11) << c.precision() << std::setw(8) << c.recall() << '\n';
        }
    }
    if (!tree_rows.empty()) {
        out << "\ntree decoding\n";
        out << "dataset     branching  steps  tokens  per_step  avg_exit  evaluations   bound  agreement\n";
        for (const auto& r : tree_rows) {
            std::string b;
            for (std::size_t i = 0; i < r.branching.size(); ++i)
                b += (i ? "x" : "") + std::to_string(r.branching[i]);
            out << std::left << std::setw(12) << r.dataset << std::setw(9) << b << std::right << std::setw(7)
                << r.steps << std::setw(8) << r.committed_tokens << std::setw(10) << r.avg_committed_per_step
                << std::setw(10) << r.avg_exit_layer << std::setw(13) << r.predictor_evaluations << std::setw(8)
                << r.evaluation_bound << std::setw(11) << r.agreement << '\n';
        }
    }
    return out.str();
}

std::string format_report_jsonl(std::span<const BenchReport> rows, std::span<const TreeBenchReport> tree_rows)
{
    std::string out;
    for (const auto& r : rows) {
        json conf = json::array();
        for (std::size_t l = 0; l < r.confusion.size(); ++l) {
            const auto& c = r.confusion[l];
            conf.push_back({{"layer", l},
                            {"tp", c.tp},
                            {"fp", c.fp},
                            {"tn", c.tn},
                            {"fn", c.fn},
                            {"precision", c.precision()},
                            {"recall", c.recall()}});
        }
        json j{{"kind", "exit"},
               {"dataset", r.dataset},
               {"mode", r.mode},
               {"num_layers", r.num_layers},
               {"tokens", r.tokens},
               {"avg_exit_layer", r.avg_exit_layer},
               {"oracle_avg_exit_layer", r.oracle_avg_exit_layer},
               {"agreement", r.agreement},
               {"active_layer_avg", r.active_layer_avg},
               {"predictor_evaluations", r.predictor_evaluations},
               {"verified_exits", r.verified_exits},
               {"online_hit_rate", r.online_hit_rate},
               {"online_base_rate", r.online_base_rate},
               {"online_ratio", r.online_ratio()},
               {"confusion", conf}};
        out += j.dump() + "\n";
    }
    for (const auto& r : tree_rows) {
        json j{{"kind", "tree"},
               {"dataset", r.dataset},
               {"branching", r.branching},
               {"steps", r.steps},
               {"committed_tokens", r.committed_tokens},
               {"avg_committed_per_step", r.avg_committed_per_step},
               {"avg_exit_layer", r.avg_exit_layer},
               {"predictor_evaluations", r.predictor_evaluations},
               {"evaluation_bound", r.evaluation_bound},
               {"agreement", r.agreement}};
        out += j.dump() + "\n";
    }
    return out;
}

}  // namespace specee
