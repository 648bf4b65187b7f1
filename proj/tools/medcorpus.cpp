#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "medcorpus/pipeline.hpp"
#include "medcorpus/perceiver.hpp"

namespace fs = std::filesystem;
using namespace medcorpus;

namespace {

json read_json_file(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void emit(const std::string& command, const std::string& config_text, pipeline::StageRecord rec, const fs::path& out) {
    pipeline::RunManifest m;
    m.command = command;
    m.config_sha256 = sha256_hex(config_text);
    m.stages.push_back(std::move(rec));
    pipeline::write_manifest(std::move(m), out);
}

void print_stage(const pipeline::StageRecord& rec) {
    std::cout << rec.name << ": " << rec.outputs.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic pediatric multimodal corpus toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic cohort");
    std::string synth_config, synth_out;
    synth_cmd->add_option("--config", synth_config, "Generator config JSON")->check(CLI::ExistingFile);
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();

    // dedup
    auto* dedup_cmd = app.add_subcommand("dedup", "Near-duplicate removal for outpatient records");
    std::string dedup_in, dedup_out;
    dedup::LshParams lsh;
    dedup_cmd->add_option("--in", dedup_in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    dedup_cmd->add_option("--out", dedup_out, "Output directory")->required();
    dedup_cmd->add_option("--threshold", lsh.threshold, "Jaccard threshold")->capture_default_str();
    dedup_cmd->add_option("--bands", lsh.bands, "LSH bands")->capture_default_str();
    dedup_cmd->add_option("--rows", lsh.rows, "Rows per band")->capture_default_str();
    dedup_cmd->add_option("--num-perm", lsh.num_perm, "Signature length")->capture_default_str();
    dedup_cmd->add_option("--ngram", lsh.ngram, "Shingle width in characters")->capture_default_str();
    dedup_cmd->add_option("--seed", lsh.seed, "Hash-family seed")->capture_default_str();

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "Select training records for one stage");
    int sample_stage = 1;
    std::string sample_in, sample_plan, sample_out, sample_dedup;
    std::uint64_t sample_seed = 7;
    sample_cmd->add_option("--stage", sample_stage, "Stage")->required()->check(CLI::Range(1, 3));
    sample_cmd->add_option("--in", sample_in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    sample_cmd->add_option("--plan", sample_plan, "Stage plan JSON")->check(CLI::ExistingFile);
    auto* seed_opt = sample_cmd->add_option("--seed", sample_seed, "Sampling seed")->capture_default_str();
    sample_cmd->add_option("--dedup", sample_dedup, "dedup_report.json restricting outpatient candidates")
        ->check(CLI::ExistingFile);
    sample_cmd->add_option("--out", sample_out, "Output directory")->required();

    // preprocess
    auto* pre_cmd = app.add_subcommand("preprocess", "Window, resize and pad study images");
    std::string pre_in, pre_out;
    imaging::PreprocessConfig pre_config;
    pre_cmd->add_option("--in", pre_in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    pre_cmd->add_option("--out", pre_out, "Output directory")->required();
    pre_cmd->add_option("--target-size", pre_config.target_size, "In-plane size")->capture_default_str();
    pre_cmd->add_option("--level", pre_config.window.level, "HU window level")->capture_default_str();
    pre_cmd->add_option("--width", pre_config.window.width, "HU window width")->capture_default_str();
    pre_cmd->add_option("--thickness", pre_config.slice_thickness_mm, "CT slice thickness (mm)")
        ->capture_default_str();

    // assemble
    auto* asm_cmd = app.add_subcommand("assemble", "Build conversation instances for a selection");
    std::string asm_in, asm_selection, asm_out, asm_images, asm_templates;
    conversation::AssembleOptions asm_options;
    std::string asm_scheme = "unicode_chars";
    bool asm_no_interleave = false, asm_benchmark = false;
    asm_cmd->add_option("--in", asm_in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    asm_cmd->add_option("--selection", asm_selection, "selection.json")->check(CLI::ExistingFile);
    asm_cmd->add_option("--out", asm_out, "Output directory")->required();
    asm_cmd->add_option("--images", asm_images, "Preprocess output directory")->check(CLI::ExistingDirectory);
    asm_cmd->add_option("--templates", asm_templates, "Template directory")->check(CLI::ExistingDirectory);
    asm_cmd->add_option("--max-tokens", asm_options.max_tokens, "Token budget")->capture_default_str();
    asm_cmd->add_option("--image-cost", asm_options.counter.image_token_cost, "Tokens per image")
        ->capture_default_str();
    asm_cmd->add_option("--scheme", asm_scheme, "unicode_chars or whitespace_words")->capture_default_str();
    asm_cmd->add_flag("--no-interleave", asm_no_interleave, "One instance per study");
    asm_cmd->add_flag("--benchmark", asm_benchmark, "Also write benchmark.jsonl for the test split");

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "Summarize a corpus or pipeline directory");
    std::string stats_in;
    stats_cmd->add_option("--in", stats_in, "Directory")->required()->check(CLI::ExistingDirectory);

    // score
    auto* score_cmd = app.add_subcommand("score", "Judge candidate outputs against the benchmark");
    std::string score_test, score_candidates, score_url, score_judge, score_out, score_exemplars;
    std::size_t score_in_flight = 4;
    int score_retries = 3;
    score_cmd->add_option("--test", score_test, "Directory with benchmark.jsonl")->required()->check(CLI::ExistingDirectory);
    score_cmd->add_option("--candidates", score_candidates, "Candidate JSONL")->required()->check(CLI::ExistingFile);
    auto* url_opt = score_cmd->add_option("--judge-url", score_url, "Completion endpoint URL");
    auto* judge_opt = score_cmd->add_option("--judge", score_judge, "Built-in judge ('stub')")
                          ->check(CLI::IsMember({"stub"}));
    url_opt->excludes(judge_opt);
    score_cmd->add_option("--out", score_out, "Output directory")->required();
    score_cmd->add_option("--exemplars", score_exemplars, "Exemplar library JSON")->check(CLI::ExistingFile);
    score_cmd->add_option("--max-in-flight", score_in_flight, "Concurrent judge requests")->capture_default_str();
    score_cmd->add_option("--retries", score_retries, "Retries per request")->capture_default_str();

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of the reference math");
    std::uint64_t grad_seed = 1;
    double grad_eps = 1e-5;
    std::string grad_params;
    grad_cmd->add_option("--seed", grad_seed, "Seed")->capture_default_str();
    grad_cmd->add_option("--eps", grad_eps, "Central-difference step")->capture_default_str();
    grad_cmd->add_option("--save-params", grad_params, "Write a reduced-width parameter set as P2TN files");

    // run
    auto* run_cmd = app.add_subcommand("run", "Run every stage from one config");
    std::string run_config, run_out;
    run_cmd->add_option("--config", run_config, "Pipeline config JSON")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--out", run_out, "Override out_dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth_cmd) {
            std::string text = "{}";
            synth::GeneratorConfig cfg;
            if (!synth_config.empty()) {
                text = read_file(synth_config);
                cfg = synth::config_from_json(read_json_file(synth_config));
            }
            const auto rec = pipeline::synth_stage(cfg, synth_out);
            print_stage(rec);
            emit("synth", text, rec, synth_out);
        } else if (*dedup_cmd) {
            lsh.validate();
            const auto rec = pipeline::dedup_stage(dedup_in, lsh, dedup_out);
            print_stage(rec);
            emit("dedup", dedup::to_json(lsh).dump(), rec, dedup_out);
        } else if (*sample_cmd) {
            sampling::StagePlan plan = sampling::StagePlan::defaults(sample_stage, sample_seed);
            if (!sample_plan.empty()) {
                json j = read_json_file(sample_plan);
                if (seed_opt->count() > 0 || !j.contains("seed")) j["seed"] = sample_seed;
                plan = sampling::plan_from_json(j);
                if (plan.stage != sample_stage) {
                    throw ValidationError("plan is for stage " + std::to_string(plan.stage) + ", not " +
                                          std::to_string(sample_stage));
                }
            }
            const auto rec = pipeline::sample_stage(plan, sample_in, sample_dedup, sample_out);
            print_stage(rec);
            for (const auto& w : rec.outputs.at("warnings")) std::cerr << "warning: " << w.get<std::string>() << "\n";
            emit("sample", sampling::to_json(plan).dump(), rec, sample_out);
        } else if (*pre_cmd) {
            const auto rec = pipeline::preprocess_stage(pre_in, pre_config, pre_out);
            print_stage(rec);
            emit("preprocess", pipeline::to_json(pre_config).dump(), rec, pre_out);
        } else if (*asm_cmd) {
            asm_options.interleave = !asm_no_interleave;
            json counter = {{"scheme", asm_scheme}, {"image_token_cost", asm_options.counter.image_token_cost}};
            asm_options.counter = conversation::counter_from_json(counter);
            const auto templates = asm_templates.empty() ? conversation::TemplateLibrary::builtin()
                                                         : conversation::TemplateLibrary::load(asm_templates);
            const conversation::ImageResolver images =
                asm_images.empty() ? conversation::ImageResolver(conversation::raw_series_refs)
                                   : pipeline::preprocessed_resolver(asm_images);
            if (asm_selection.empty() && !asm_benchmark) {
                throw ValidationError("assemble: pass --selection, --benchmark or both");
            }
            const json settings = {{"max_tokens", asm_options.max_tokens},
                                   {"token_counter", counter},
                                   {"interleave", asm_options.interleave}};
            pipeline::RunManifest m;
            m.command = "assemble";
            m.config_sha256 = sha256_hex(settings.dump());
            if (!asm_selection.empty()) {
                m.stages.push_back(
                    pipeline::assemble_stage(asm_in, asm_selection, templates, asm_options, images, asm_out));
                print_stage(m.stages.back());
            }
            if (asm_benchmark) {
                m.stages.push_back(pipeline::benchmark_stage(asm_in, templates, images, asm_out));
                print_stage(m.stages.back());
            }
            pipeline::write_manifest(std::move(m), asm_out);
        } else if (*stats_cmd) {
            std::cout << pipeline::collect_stats(stats_in).dump(2) << "\n";
        } else if (*score_cmd) {
            if (score_url.empty() && score_judge.empty()) throw ValidationError("score: pass --judge-url or --judge stub");
            const auto library = score_exemplars.empty() ? eval::ExemplarLibrary::builtin()
                                                         : eval::ExemplarLibrary::load(score_exemplars);
            auto judge = pipeline::make_judge(score_url.empty() ? score_judge : score_url, score_retries);
            eval::BenchmarkOptions opts;
            opts.max_in_flight = score_in_flight;
            const auto rec = pipeline::score_stage(fs::path(score_test) / "benchmark.jsonl", score_candidates, *judge,
                                                   library, opts, score_out);
            print_stage(rec);
            emit("score", score_url.empty() ? score_judge : score_url, rec, score_out);
        } else if (*grad_cmd) {
            const auto report = [](const char* name, const perceiver::GradcheckResult& r) {
                std::printf("%-16s max_rel_error=%.3e probes=%zu\n", name, r.max_rel_error, r.probes);
                for (const auto& [block, err] : r.per_block) std::printf("  %-14s %.3e\n", block.c_str(), err);
            };
            report("linear", perceiver::gradcheck_linear(grad_seed, grad_eps));
            report("cross_attention", perceiver::gradcheck_attention(grad_seed, grad_eps));
            report("lora", perceiver::gradcheck_lora(grad_seed, grad_eps));
            if (!grad_params.empty()) {
                perceiver::PerceiverConfig small;
                small.width = 256;
                small.vision_dim = 64;
                small.seed = grad_seed;
                perceiver::save_params(perceiver::PerceiverParams<float>::make(small), grad_params);
            }
        } else if (*run_cmd) {
            const std::string text = read_file(run_config);
            json j = read_json_file(run_config);
            if (!run_out.empty()) j["out_dir"] = run_out;
            const auto cfg = pipeline::config_from_json(j);
            const auto start = std::chrono::steady_clock::now();
            const auto manifest =
                pipeline::run_pipeline(cfg, text, [](const std::string& msg) { std::cerr << msg << "\n"; });
            for (const auto& s : manifest.stages) print_stage(s);
            std::cerr << "done in "
                      << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
