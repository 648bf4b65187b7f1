#include "medcorpus/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <set>

namespace medcorpus::pipeline {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

std::string jsonl(const std::vector<json>& items) {
    std::string out;
    for (const auto& item : items) out += to_jsonl_line(item);
    return out;
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    const auto lines = split_lines(read_file(path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (is_blank(lines[i])) continue;
        try {
            out.push_back(json::parse(lines[i]));
        } catch (const json::parse_error& e) {
            throw ParseError(path.string(), i + 1, e.what());
        }
    }
    return out;
}

json task_counts(const std::map<TaskKind, std::size_t>& counts) {
    json out = json::object();
    for (const auto& [task, n] : counts) out[std::string(task_name(task))] = n;
    return out;
}

conversation::ImageResolver prefixed_raw_refs(const std::string& prefix) {
    return [prefix](const RadiologyStudy& study) {
        auto refs = conversation::raw_series_refs(study);
        for (auto& r : refs) r = prefix + r;
        return refs;
    };
}

}  // namespace

// ---------------------------------------------------------------------------

sampling::StagePlan SamplingSettings::plan(int stage) const {
    const auto it = plans.find(stage);
    return it != plans.end() ? it->second : sampling::StagePlan::defaults(stage, seed);
}

void PipelineConfig::validate() const {
    if (out_dir.empty()) throw ValidationError("config.out_dir must not be empty");
    synth.validate();
    dedup.validate();
    for (const auto& [stage, plan] : sampling.plans) {
        if (stage != plan.stage) throw ValidationError("config.sampling.plans: key does not match plan stage");
        plan.validate();
    }
    if (preprocess.enabled && !synth.write_images) {
        throw ValidationError("config: preprocess.enabled requires synth.write_images");
    }
    if (preprocess.config.target_size < 2) throw ValidationError("config.preprocess.target_size must be >= 2");
    if (!(preprocess.config.window.width > 0)) throw ValidationError("config.preprocess.window.width must be > 0");
    assemble.options.counter.validate();
    if (assemble.options.max_tokens < 1) throw ValidationError("config.assemble.max_tokens must be >= 1");
    if (score.max_in_flight == 0) throw ValidationError("config.score.max_in_flight must be >= 1");
    if (score.judge != "stub" && score.judge.rfind("http://", 0) != 0 && score.judge.rfind("https://", 0) != 0) {
        throw ValidationError("config.score.judge must be 'stub' or an http(s) URL");
    }
}

imaging::PreprocessConfig preprocess_from_json(const json& j) {
    StrictObject obj(j, "preprocess");
    imaging::PreprocessConfig c;
    c.target_size = obj.get_or<std::uint32_t>("target_size", c.target_size);
    if (obj.has("window")) {
        StrictObject w(obj.at("window"), "preprocess.window");
        c.window.level = w.get_or<double>("level", c.window.level);
        c.window.width = w.get_or<double>("width", c.window.width);
        w.finish();
    }
    c.slice_thickness_mm = obj.get_or<double>("slice_thickness_mm", c.slice_thickness_mm);
    c.thickness_tolerance = obj.get_or<double>("thickness_tolerance", c.thickness_tolerance);
    obj.finish();
    return c;
}

json to_json(const imaging::PreprocessConfig& c) {
    return {{"target_size", c.target_size},
            {"window", {{"level", c.window.level}, {"width", c.window.width}}},
            {"slice_thickness_mm", c.slice_thickness_mm},
            {"thickness_tolerance", c.thickness_tolerance}};
}

PipelineConfig config_from_json(const json& j) {
    StrictObject obj(j, "config");
    PipelineConfig c;
    c.out_dir = obj.get_or<std::string>("out_dir", c.out_dir);
    if (obj.has("synth")) c.synth = synth::config_from_json(obj.at("synth"));
    if (obj.has("dedup")) c.dedup = dedup::params_from_json(obj.at("dedup"));
    if (obj.has("sampling")) {
        StrictObject s(obj.at("sampling"), "config.sampling");
        c.sampling.seed = s.get_or<std::uint64_t>("seed", c.sampling.seed);
        if (s.has("plans")) {
            for (const auto& [key, value] : s.at("plans").items()) {
                json plan = value;
                if (!plan.contains("seed")) plan["seed"] = c.sampling.seed;
                c.sampling.plans[std::stoi(key)] = sampling::plan_from_json(plan);
            }
        }
        s.finish();
    }
    if (obj.has("preprocess")) {
        json p = obj.at("preprocess");
        if (p.is_object() && p.contains("enabled")) {
            c.preprocess.enabled = p.at("enabled").get<bool>();
            p.erase("enabled");
        }
        c.preprocess.config = preprocess_from_json(p);
    }
    if (obj.has("assemble")) {
        StrictObject a(obj.at("assemble"), "config.assemble");
        c.assemble.options.max_tokens = a.get_or<std::int64_t>("max_tokens", c.assemble.options.max_tokens);
        if (a.has("token_counter")) c.assemble.options.counter = conversation::counter_from_json(a.at("token_counter"));
        c.assemble.options.interleave = a.get_or<bool>("interleave", c.assemble.options.interleave);
        c.assemble.templates = a.get_or<std::string>("templates", c.assemble.templates);
        a.finish();
    }
    if (obj.has("score")) {
        StrictObject s(obj.at("score"), "config.score");
        c.score.enabled = s.get_or<bool>("enabled", c.score.enabled);
        c.score.judge = s.get_or<std::string>("judge", c.score.judge);
        c.score.max_in_flight = s.get_or<std::size_t>("max_in_flight", c.score.max_in_flight);
        c.score.max_retries = s.get_or<int>("max_retries", c.score.max_retries);
        c.score.exemplars = s.get_or<std::string>("exemplars", c.score.exemplars);
        c.score.candidate_seed = s.get_or<std::uint64_t>("candidate_seed", c.score.candidate_seed);
        s.finish();
    }
    obj.finish();
    c.validate();
    return c;
}

json to_json(const PipelineConfig& c) {
    json plans = json::object();
    for (const auto& [stage, plan] : c.sampling.plans) plans[std::to_string(stage)] = sampling::to_json(plan);
    json pre = to_json(c.preprocess.config);
    pre["enabled"] = c.preprocess.enabled;
    return {{"out_dir", c.out_dir},
            {"synth", synth::to_json(c.synth)},
            {"dedup", dedup::to_json(c.dedup)},
            {"sampling", {{"seed", c.sampling.seed}, {"plans", plans}}},
            {"preprocess", pre},
            {"assemble",
             {{"max_tokens", c.assemble.options.max_tokens},
              {"token_counter", conversation::to_json(c.assemble.options.counter)},
              {"interleave", c.assemble.options.interleave},
              {"templates", c.assemble.templates}}},
            {"score",
             {{"enabled", c.score.enabled},
              {"judge", c.score.judge},
              {"max_in_flight", c.score.max_in_flight},
              {"max_retries", c.score.max_retries},
              {"exemplars", c.score.exemplars},
              {"candidate_seed", c.score.candidate_seed}}}};
}

PipelineConfig load_config(const fs::path& path) { return config_from_json(read_json(path)); }

// ---------------------------------------------------------------------------

json to_json(const RunManifest& m) {
    json stages = json::array();
    for (const auto& s : m.stages) {
        stages.push_back({{"name", s.name}, {"inputs", s.inputs}, {"outputs", s.outputs}, {"seconds", s.seconds}});
    }
    json out = {{"tool_version", m.tool_version}, {"command", m.command},     {"config_sha256", m.config_sha256},
                {"stages", stages},               {"artifacts", m.artifacts}, {"status", m.status}};
    if (!m.error.empty()) out["error"] = m.error;
    return out;
}

std::map<std::string, std::string> artifact_digests(const fs::path& dir) {
    std::map<std::string, std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string rel = fs::relative(entry.path(), dir).generic_string();
        if (rel == "run_manifest.json") continue;
        out[rel] = sha256_file(entry.path());
    }
    return out;
}

void write_manifest(RunManifest manifest, const fs::path& dir) {
    manifest.artifacts = artifact_digests(dir);
    write_file(dir / "run_manifest.json", to_json(manifest).dump(2) + "\n");
}

// ---------------------------------------------------------------------------

StageRecord synth_stage(const synth::GeneratorConfig& config, const fs::path& out) {
    const auto start = Clock::now();
    config.validate();
    const synth::Cohort cohort = synth::generate_cohort(config);
    synth::write_cohort(cohort, config, out);

    std::map<TaskKind, std::size_t> volumes, tests;
    for (const auto& s : cohort.corpus.studies) ++volumes[task_for_modality(s.modality)];
    for (const auto& r : cohort.corpus.records) ++volumes[r.task_kind];
    for (const auto& [task, ids] : cohort.test_ids) tests[task] = ids.size();
    StageRecord rec{"synth", {{"seed", config.seed}, {"scale", config.scale}}, {}, 0.0};
    rec.outputs = {{"patients", cohort.corpus.patients.size()},
                   {"studies", cohort.corpus.studies.size()},
                   {"records", cohort.corpus.records.size()},
                   {"per_task", task_counts(volumes)},
                   {"test_set", task_counts(tests)},
                   {"duplicate_pairs", cohort.manifest.size()}};
    rec.seconds = seconds_since(start);
    return rec;
}

StageRecord dedup_stage(const fs::path& corpus_dir, const dedup::LshParams& params, const fs::path& out) {
    const auto start = Clock::now();
    params.validate();
    const Corpus corpus = read_corpus(corpus_dir);
    std::vector<ClinicalRecord> outpatient;
    for (const auto& r : corpus.records) {
        if (r.task_kind == TaskKind::OutpatientRecord) outpatient.push_back(r);
    }
    const auto report = dedup::dedup_corpus(dedup::items_from_records(outpatient), params);
    write_file(out / "dedup_report.json", dedup::to_json(report).dump(2) + "\n");
    StageRecord rec{"dedup", {{"records", outpatient.size()}, {"params", dedup::to_json(params)}}, {}, 0.0};
    rec.outputs = {{"kept", report.kept_ids.size()},
                   {"dropped", report.dropped_ids.size()},
                   {"groups", report.groups.size()},
                   {"too_short", report.too_short_ids.size()}};
    rec.seconds = seconds_since(start);
    return rec;
}

StageRecord sample_stage(const sampling::StagePlan& plan, const fs::path& corpus_dir, const fs::path& dedup_report,
                         const fs::path& out) {
    const auto start = Clock::now();
    plan.validate();
    const Corpus corpus = read_corpus(corpus_dir);
    const auto test_ids = synth::read_test_split(corpus_dir / "test_set.json");
    std::optional<std::set<std::string>> kept;
    if (!dedup_report.empty()) {
        const auto report = dedup::report_from_json(read_json(dedup_report));
        kept.emplace(report.kept_ids.begin(), report.kept_ids.end());
    }
    const auto pools = sampling::build_pools(corpus, test_ids, kept);
    const auto result = sampling::run_plan(pools, plan);
    write_file(out / "selection.json", sampling::to_json(result).dump(2) + "\n");
    write_file(out / "distribution.csv", sampling::to_csv(sampling::distribution_report(result)));

    std::map<TaskKind, std::size_t> counts;
    for (const auto& [task, sel] : result.tasks) counts[task] = sel.ids.size();
    StageRecord rec{"sample_stage" + std::to_string(plan.stage),
                    {{"plan", sampling::to_json(plan)}, {"dedup_applied", kept.has_value()}},
                    {},
                    0.0};
    rec.outputs = {{"selected", result.total()}, {"per_task", task_counts(counts)}, {"warnings", result.warnings}};
    rec.seconds = seconds_since(start);
    return rec;
}

StageRecord preprocess_stage(const fs::path& corpus_dir, const imaging::PreprocessConfig& config,
                             const fs::path& out) {
    const auto start = Clock::now();
    const Corpus corpus = read_corpus(corpus_dir);
    std::vector<json> manifest, failures;
    std::size_t tensors = 0;
    for (const auto& study : corpus.studies) {
        try {
            const auto images = imaging::preprocess_study(study, config, corpus_dir);
            json entries = json::array();
            for (const auto& img : images) {
                const std::string file = study.study_id + "_" + std::string(to_string(img.kind)) + ".p2tn";
                imaging::write_volume(out / file, img.volume);
                entries.push_back({{"kind", to_string(img.kind)},
                                   {"ref", file},
                                   {"dims", {img.volume.dims.z, img.volume.dims.y, img.volume.dims.x}}});
                ++tensors;
            }
            manifest.push_back({{"study_id", study.study_id}, {"images", entries}});
        } catch (const SeriesSelectionError& e) {
            failures.push_back({{"study_id", study.study_id}, {"error", e.what()}});
        } catch (const ShapeError& e) {
            failures.push_back({{"study_id", study.study_id}, {"error", e.what()}});
        } catch (const IoError& e) {
            failures.push_back({{"study_id", study.study_id}, {"error", e.what()}});
        }
    }
    write_file(out / "preprocess.jsonl", jsonl(manifest));
    write_file(out / "preprocess_failures.jsonl", jsonl(failures));
    StageRecord rec{"preprocess", {{"studies", corpus.studies.size()}, {"config", to_json(config)}}, {}, 0.0};
    rec.outputs = {{"studies", manifest.size()}, {"tensors", tensors}, {"failures", failures.size()}};
    rec.seconds = seconds_since(start);
    return rec;
}

conversation::ImageResolver preprocessed_resolver(const fs::path& preprocess_dir) {
    auto refs = std::make_shared<std::map<std::string, std::vector<std::string>>>();
    const std::string prefix = preprocess_dir.filename().generic_string() + "/";
    for (const auto& entry : read_jsonl(preprocess_dir / "preprocess.jsonl")) {
        auto& list = (*refs)[entry.at("study_id").get<std::string>()];
        for (const auto& img : entry.at("images")) list.push_back(prefix + img.at("ref").get<std::string>());
    }
    return [refs](const RadiologyStudy& study) {
        const auto it = refs->find(study.study_id);
        return it == refs->end() ? std::vector<std::string>{} : it->second;
    };
}

StageRecord assemble_stage(const fs::path& corpus_dir, const fs::path& selection,
                           const conversation::TemplateLibrary& templates,
                           const conversation::AssembleOptions& options, const conversation::ImageResolver& images,
                           const fs::path& out) {
    const auto start = Clock::now();
    const Corpus corpus = read_corpus(corpus_dir);
    const auto sel = sampling::selection_from_json(read_json(selection));
    const auto report = conversation::assemble_selection(corpus, sel, templates, options, images);
    std::vector<json> lines;
    std::map<TaskKind, std::size_t> counts;
    for (const auto& inst : report.instances) {
        if (!conversation::loss_mask_is_exact(inst)) {
            throw StageError("assemble", "loss mask check failed for " + inst.instance_id);
        }
        lines.push_back(conversation::to_json(inst));
        ++counts[inst.task_kind];
    }
    write_file(out / "train.jsonl", jsonl(lines));
    const json summary = {{"stage", sel.stage},
                          {"instances", report.instances.size()},
                          {"per_task", task_counts(counts)},
                          {"incomplete", report.incomplete},
                          {"over_budget", report.over_budget},
                          {"dropped_ids", report.dropped_ids}};
    write_file(out / "assemble_report.json", summary.dump(2) + "\n");
    StageRecord rec{"assemble_stage" + std::to_string(sel.stage), {{"selected", sel.total()}}, {}, 0.0};
    rec.outputs = {{"instances", report.instances.size()},
                   {"per_task", task_counts(counts)},
                   {"incomplete", report.incomplete},
                   {"over_budget", report.over_budget}};
    rec.seconds = seconds_since(start);
    return rec;
}

StageRecord benchmark_stage(const fs::path& corpus_dir, const conversation::TemplateLibrary& templates,
                            const conversation::ImageResolver& images, const fs::path& out) {
    const auto start = Clock::now();
    const Corpus corpus = read_corpus(corpus_dir);
    const auto test_ids = synth::read_test_split(corpus_dir / "test_set.json");
    const auto samples = conversation::build_benchmark(corpus, test_ids, templates, images);
    std::vector<json> lines;
    std::map<TaskKind, std::size_t> counts;
    for (const auto& s : samples) {
        lines.push_back(conversation::to_json(s));
        ++counts[s.task_kind];
    }
    write_file(out / "benchmark.jsonl", jsonl(lines));
    StageRecord rec{"benchmark", json::object(), {{"samples", samples.size()}, {"per_task", task_counts(counts)}}, 0.0};
    rec.seconds = seconds_since(start);
    return rec;
}

std::vector<conversation::BenchmarkSample> read_benchmark(const fs::path& path) {
    std::vector<conversation::BenchmarkSample> out;
    for (const auto& j : read_jsonl(path)) out.push_back(conversation::benchmark_from_json(j));
    return out;
}

eval::Candidates retrieval_baseline(const Corpus& corpus, const synth::TestSplit& test_ids,
                                    const std::vector<conversation::BenchmarkSample>& samples, std::uint64_t seed) {
    std::set<std::string> blocked;
    for (const auto& [task, ids] : test_ids) blocked.insert(ids.begin(), ids.end());
    std::map<TaskKind, std::vector<Sections>> pools;
    for (const auto& s : corpus.studies) {
        if (blocked.contains(s.study_id)) continue;
        const auto& labels = task_output_labels(task_for_modality(s.modality));
        pools[task_for_modality(s.modality)].push_back({{labels.at(0), s.findings}, {labels.at(1), s.impression}});
    }
    for (const auto& r : corpus.records) {
        if (!blocked.contains(r.record_id)) pools[r.task_kind].push_back(r.output_sections);
    }
    eval::Candidates out;
    for (const auto& sample : samples) {
        const auto& pool = pools[sample.task_kind];
        if (pool.empty()) {
            out[sample.sample_id] = {};
            continue;
        }
        Rng rng(derive_seed(seed, "baseline/" + sample.sample_id));
        out[sample.sample_id] = pool[rng.below(pool.size())];
    }
    return out;
}

std::unique_ptr<eval::Judge> make_judge(const std::string& judge, int max_retries) {
    if (judge == "stub") return std::make_unique<eval::StubJudge>();
    eval::HttpJudgeOptions opts;
    opts.url = judge;
    opts.max_retries = max_retries;
    return std::make_unique<eval::HttpJudge>(opts);
}

StageRecord score_stage(const fs::path& benchmark, const fs::path& candidates, eval::Judge& judge,
                        const eval::ExemplarLibrary& library, const eval::BenchmarkOptions& options,
                        const fs::path& out) {
    const auto start = Clock::now();
    const auto samples = read_benchmark(benchmark);
    const auto cands = eval::read_candidates(candidates);
    const auto report = eval::run_benchmark(samples, cands, judge, library, options);
    eval::write_report(report, out);
    json overall = json::object();
    for (const auto& [metric, v] : report.overall) overall[std::string(eval::to_string(metric))] = v;
    StageRecord rec{"score", {{"samples", samples.size()}, {"candidates", cands.size()}}, {}, 0.0};
    rec.outputs = {{"requested", report.requested},
                   {"scored", report.scores.size()},
                   {"rejected", report.rejects.size()},
                   {"failed", report.failures.size()},
                   {"overall", overall}};
    rec.seconds = seconds_since(start);
    return rec;
}

json collect_stats(const fs::path& dir) {
    json out = json::object();
    const fs::path corpus_dir = fs::exists(dir / "records.jsonl") ? dir : dir / "synth";
    if (fs::exists(corpus_dir / "records.jsonl")) {
        const Corpus corpus = read_corpus(corpus_dir);
        std::map<TaskKind, std::size_t> counts;
        std::map<TaskKind, std::set<std::string>> labels;
        for (const auto& s : corpus.studies) {
            ++counts[task_for_modality(s.modality)];
            labels[task_for_modality(s.modality)].insert(s.disease_labels.begin(), s.disease_labels.end());
        }
        for (const auto& r : corpus.records) {
            ++counts[r.task_kind];
            labels[r.task_kind].insert(r.disease_labels.begin(), r.disease_labels.end());
        }
        std::map<TaskKind, std::size_t> label_counts;
        for (const auto& [task, set] : labels) label_counts[task] = set.size();
        out["corpus"] = {{"patients", corpus.patients.size()},
                         {"studies", corpus.studies.size()},
                         {"records", corpus.records.size()},
                         {"per_task", task_counts(counts)},
                         {"distinct_labels", task_counts(label_counts)}};
    }
    if (fs::exists(dir / "dedup" / "dedup_report.json")) {
        out["dedup"] = read_json(dir / "dedup" / "dedup_report.json").at("counts");
    }
    for (int stage = 1; stage <= 3; ++stage) {
        const fs::path sel = dir / "sample" / ("stage" + std::to_string(stage)) / "selection.json";
        if (!fs::exists(sel)) continue;
        const auto result = sampling::selection_from_json(read_json(sel));
        const auto table = sampling::distribution_report(result);
        json tasks = json::object();
        for (const auto& [task, s] : result.tasks) {
            json entry = {{"selected", s.ids.size()}, {"categories", s.included_categories.size()}};
            const auto it = table.balance.find(task);
            if (it != table.balance.end()) entry["balance_ratio"] = it->second.ratio;
            tasks[std::string(task_name(task))] = entry;
        }
        out["stage" + std::to_string(stage)] = {{"selected", result.total()}, {"tasks", tasks}};
        const fs::path train = dir / "assemble" / ("stage" + std::to_string(stage)) / "assemble_report.json";
        if (fs::exists(train)) out["stage" + std::to_string(stage)]["train"] = read_json(train).at("instances");
    }
    return out;
}

// ---------------------------------------------------------------------------

RunManifest run_pipeline(const PipelineConfig& config, const std::string& config_text,
                         const std::function<void(const std::string&)>& log) {
    config.validate();
    const fs::path root = config.out_dir;
    for (const char* sub : {"synth", "dedup", "sample", "preprocess", "assemble", "benchmark", "score"}) {
        fs::remove_all(root / sub);
    }
    RunManifest manifest;
    manifest.command = "run";
    manifest.config_sha256 = sha256_hex(config_text);

    auto step = [&](const std::string& name, auto&& body) {
        if (log) log("stage " + name);
        try {
            manifest.stages.push_back(body());
        } catch (const std::exception& e) {
            manifest.status = "failed";
            manifest.error = name + ": " + e.what();
            write_manifest(manifest, root);
            if (dynamic_cast<const ValidationError*>(&e) != nullptr) throw;
            throw StageError(name, e.what());
        }
    };

    const fs::path synth_dir = root / "synth";
    const fs::path dedup_report = root / "dedup" / "dedup_report.json";
    step("synth", [&] { return synth_stage(config.synth, synth_dir); });
    step("dedup", [&] { return dedup_stage(synth_dir, config.dedup, root / "dedup"); });
    for (int stage = 1; stage <= 3; ++stage) {
        const fs::path out = root / "sample" / ("stage" + std::to_string(stage));
        step("sample_stage" + std::to_string(stage),
             [&] { return sample_stage(config.sampling.plan(stage), synth_dir, dedup_report, out); });
    }

    conversation::ImageResolver images = prefixed_raw_refs("synth/");
    if (config.preprocess.enabled) {
        step("preprocess", [&] { return preprocess_stage(synth_dir, config.preprocess.config, root / "preprocess"); });
        images = preprocessed_resolver(root / "preprocess");
    }
    const auto templates = config.assemble.templates.empty()
                               ? conversation::TemplateLibrary::builtin()
                               : conversation::TemplateLibrary::load(config.assemble.templates);
    for (int stage = 1; stage <= 3; ++stage) {
        const std::string name = "stage" + std::to_string(stage);
        step("assemble_" + name, [&] {
            return assemble_stage(synth_dir, root / "sample" / name / "selection.json", templates,
                                  config.assemble.options, images, root / "assemble" / name);
        });
    }
    step("benchmark", [&] { return benchmark_stage(synth_dir, templates, images, root / "benchmark"); });

    if (config.score.enabled) {
        step("score", [&] {
            const Corpus corpus = read_corpus(synth_dir);
            const auto test_ids = synth::read_test_split(synth_dir / "test_set.json");
            const auto samples = read_benchmark(root / "benchmark" / "benchmark.jsonl");
            eval::write_candidates(retrieval_baseline(corpus, test_ids, samples, config.score.candidate_seed),
                                   root / "score" / "candidates.jsonl");
            const auto library = config.score.exemplars.empty() ? eval::ExemplarLibrary::builtin()
                                                                : eval::ExemplarLibrary::load(config.score.exemplars);
            auto judge = make_judge(config.score.judge, config.score.max_retries);
            eval::BenchmarkOptions opts;
            opts.max_in_flight = config.score.max_in_flight;
            return score_stage(root / "benchmark" / "benchmark.jsonl", root / "score" / "candidates.jsonl", *judge,
                               library, opts, root / "score");
        });
    }
    write_manifest(manifest, root);
    manifest.artifacts = artifact_digests(root);
    return manifest;
}

}  // namespace medcorpus::pipeline
