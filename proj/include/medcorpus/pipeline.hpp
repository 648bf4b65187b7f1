#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "medcorpus/conversation.hpp"
#include "medcorpus/dedup.hpp"
#include "medcorpus/eval.hpp"
#include "medcorpus/imaging.hpp"
#include "medcorpus/sampling.hpp"
#include "medcorpus/synthgen.hpp"

namespace medcorpus::pipeline {

inline constexpr const char* tool_version = "1.0.0";

struct SamplingSettings {
    std::uint64_t seed = 7;
    /// Overrides for stages 2 and 3; defaults apply when absent.
    std::map<int, sampling::StagePlan> plans;

    sampling::StagePlan plan(int stage) const;
};

struct PreprocessSettings {
    bool enabled = true;
    imaging::PreprocessConfig config;
};

struct AssembleSettings {
    conversation::AssembleOptions options;
    /// Template directory; built-in templates when empty.
    std::string templates;
};

struct ScoreSettings {
    bool enabled = true;
    /// "stub" or an http(s) URL.
    std::string judge = "stub";
    std::size_t max_in_flight = 4;
    int max_retries = 3;
    /// Exemplar library file; built-in when empty.
    std::string exemplars;
    std::uint64_t candidate_seed = 11;
};

struct PipelineConfig {
    std::string out_dir = "out";
    synth::GeneratorConfig synth;
    dedup::LshParams dedup;
    SamplingSettings sampling;
    PreprocessSettings preprocess;
    AssembleSettings assemble;
    ScoreSettings score;

    void validate() const;
};

/// Strict: unknown keys anywhere raise ValidationError.
PipelineConfig config_from_json(const json& j);
json to_json(const PipelineConfig& config);
PipelineConfig load_config(const std::filesystem::path& path);

imaging::PreprocessConfig preprocess_from_json(const json& j);
json to_json(const imaging::PreprocessConfig& c);

// ---------------------------------------------------------------------------

struct StageRecord {
    std::string name;
    json inputs = json::object();
    json outputs = json::object();
    double seconds = 0.0;
};

struct RunManifest {
    std::string tool_version = pipeline::tool_version;
    std::string command;
    std::string config_sha256;
    std::vector<StageRecord> stages;
    /// Relative path -> SHA-256 of every artifact under the output dir.
    std::map<std::string, std::string> artifacts;
    std::string status = "ok";
    std::string error;
};

json to_json(const RunManifest& m);

/// Digest of every regular file below `dir` except run_manifest.json.
std::map<std::string, std::string> artifact_digests(const std::filesystem::path& dir);

void write_manifest(RunManifest manifest, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Stages. Each reads its inputs from disk and writes its artifacts to `out`.

StageRecord synth_stage(const synth::GeneratorConfig& config, const std::filesystem::path& out);

StageRecord dedup_stage(const std::filesystem::path& corpus_dir, const dedup::LshParams& params,
                        const std::filesystem::path& out);

/// `dedup_report` may be empty, in which case every outpatient record is a
/// candidate.
StageRecord sample_stage(const sampling::StagePlan& plan, const std::filesystem::path& corpus_dir,
                         const std::filesystem::path& dedup_report, const std::filesystem::path& out);

/// Preprocesses every study; writes <study>_<KIND>.p2tn, preprocess.jsonl
/// and preprocess_failures.jsonl.
StageRecord preprocess_stage(const std::filesystem::path& corpus_dir, const imaging::PreprocessConfig& config,
                             const std::filesystem::path& out);

/// Image refs for preprocessed tensors, as "<preprocess dir name>/<file>".
conversation::ImageResolver preprocessed_resolver(const std::filesystem::path& preprocess_dir);

/// Writes train.jsonl and assemble_report.json for one selection.
StageRecord assemble_stage(const std::filesystem::path& corpus_dir, const std::filesystem::path& selection,
                           const conversation::TemplateLibrary& templates,
                           const conversation::AssembleOptions& options,
                           const conversation::ImageResolver& images, const std::filesystem::path& out);

/// Writes benchmark.jsonl for the held-out test ids.
StageRecord benchmark_stage(const std::filesystem::path& corpus_dir, const conversation::TemplateLibrary& templates,
                            const conversation::ImageResolver& images, const std::filesystem::path& out);

/// Reference outputs of a seeded random training item of the same task,
/// used as candidate answers when no model outputs are supplied.
eval::Candidates retrieval_baseline(const Corpus& corpus, const synth::TestSplit& test_ids,
                                    const std::vector<conversation::BenchmarkSample>& samples, std::uint64_t seed);

std::vector<conversation::BenchmarkSample> read_benchmark(const std::filesystem::path& path);

std::unique_ptr<eval::Judge> make_judge(const std::string& judge, int max_retries);

StageRecord score_stage(const std::filesystem::path& benchmark, const std::filesystem::path& candidates,
                        eval::Judge& judge, const eval::ExemplarLibrary& library,
                        const eval::BenchmarkOptions& options, const std::filesystem::path& out);

/// Corpus, dedup and selection summary for a pipeline or corpus directory.
json collect_stats(const std::filesystem::path& dir);

/// synth -> dedup -> sample 1/2/3 -> preprocess -> assemble -> score. On a
/// stage failure the partial manifest is written and StageError is thrown.
RunManifest run_pipeline(const PipelineConfig& config, const std::string& config_text,
                         const std::function<void(const std::string&)>& log = {});

}  // namespace medcorpus::pipeline
