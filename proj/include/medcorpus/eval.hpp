#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "medcorpus/conversation.hpp"
#include "medcorpus/corpus.hpp"

namespace medcorpus::eval {

enum class Metric { Accuracy, Comprehensiveness };

std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view s);

struct EvalComponent {
    TaskKind task = TaskKind::XrayReport;
    std::string component;
    std::vector<Metric> metrics;
};

/// The section scored on both metrics for a task.
const std::string& key_component(TaskKind task);

/// Every output section of the task; the key component carries both
/// metrics and the rest carry accuracy only.
std::vector<EvalComponent> eval_components(TaskKind task);

struct Exemplar {
    std::string question;
    std::string reference;
    std::string candidate;
    int score = 0;
    std::string reason;
};

/// Rubrics per metric and one-shot exemplars keyed "<task_name>/<component>".
class ExemplarLibrary {
public:
    static ExemplarLibrary builtin();
    static ExemplarLibrary load(const std::filesystem::path& path);
    json to_json() const;

    /// Throws ValidationError naming the missing key.
    const Exemplar& exemplar(TaskKind task, const std::string& component) const;
    const std::string& rubric(Metric metric) const;

    void set_exemplar(TaskKind task, const std::string& component, Exemplar e);
    void set_rubric(Metric metric, std::string text);
    void erase_exemplar(TaskKind task, const std::string& component);

    static std::string key(TaskKind task, const std::string& component);

private:
    std::map<std::string, Exemplar> exemplars_;
    std::map<Metric, std::string> rubrics_;
};

struct JudgeRequest {
    std::string prompt;
    Metric metric = Metric::Accuracy;
    int max_tokens = 256;
    double temperature = 0.0;
    /// Carried alongside the prompt for offline judges.
    std::string reference;
    std::string candidate;
};

/// Rubric, exemplar with its gold score, question, reference, candidate and
/// the "Score: <integer>\nReason: <text>" instruction, in that order.
JudgeRequest build_judge_prompt(const EvalComponent& component, Metric metric, const ExemplarLibrary& library,
                                const std::string& question, const std::string& reference,
                                const std::string& candidate);

struct ParsedScore {
    int score = 0;
    std::string rationale;
};

/// First integer after "Score:", which must lie in [0, 5]; the rationale is
/// the text after "Reason:". Throws UnscorableOutput otherwise.
ParsedScore parse_score(const std::string& judge_output);

struct AggregateResult {
    double mean = 0.0;
    std::size_t n = 0;
    /// Sample standard deviation; undefined for n = 1.
    std::optional<double> sd;
    /// 95% t interval; undefined for n = 1.
    std::optional<double> ci_low;
    std::optional<double> ci_high;
};

/// Throws ValidationError when `scores` is empty.
AggregateResult aggregate(const std::vector<double>& scores);

/// Two-sided 95% quantile t_{0.975, dof}.
double t_quantile_975(double dof);

// ---------------------------------------------------------------------------

class Judge {
public:
    virtual ~Judge() = default;
    /// Returns the raw completion text. Throws JudgeUnavailable when the
    /// backend cannot be reached.
    virtual std::string complete(const JudgeRequest& request) = 0;
};

class JudgeUnavailable : public Error {
public:
    using Error::Error;
};

/// Offline judge scoring character 3-gram overlap: Jaccard for accuracy,
/// recall of the reference for comprehensiveness, scaled to 0..5.
class StubJudge : public Judge {
public:
    std::string complete(const JudgeRequest& request) override;
};

/// Overlap in [0, 1] the stub judge uses.
double stub_overlap(const std::string& reference, const std::string& candidate, Metric metric);

struct HttpJudgeOptions {
    std::string url;
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{200};
    std::chrono::seconds timeout{60};
};

/// POSTs {"prompt", "max_tokens", "temperature"} to the endpoint and reads
/// {"text"} from the response, retrying with exponential backoff.
class HttpJudge : public Judge {
public:
    explicit HttpJudge(HttpJudgeOptions options);
    std::string complete(const JudgeRequest& request) override;

private:
    HttpJudgeOptions options_;
    std::string base_;
    std::string path_;
};

// ---------------------------------------------------------------------------

struct ScoreRecord {
    std::string sample_id;
    TaskKind task = TaskKind::XrayReport;
    std::string component;
    Metric metric = Metric::Accuracy;
    int score = 0;
    std::string rationale;
    std::string raw;
};

struct RejectRecord {
    std::string sample_id;
    TaskKind task = TaskKind::XrayReport;
    std::string component;
    Metric metric = Metric::Accuracy;
    std::string raw;
    std::string error;
};

struct GroupAggregate {
    TaskKind task = TaskKind::XrayReport;
    std::string component;
    Metric metric = Metric::Accuracy;
    AggregateResult result;
};

struct BenchmarkReport {
    std::vector<ScoreRecord> scores;
    std::vector<RejectRecord> rejects;
    /// Requests the judge could not answer after retries.
    std::vector<RejectRecord> failures;
    std::vector<GroupAggregate> groups;
    /// Per metric: mean over tasks of the mean of that task's component means.
    std::map<Metric, double> overall;
    std::size_t requested = 0;
};

struct BenchmarkOptions {
    std::size_t max_in_flight = 4;
    int max_tokens = 256;
    double temperature = 0.0;
};

/// Candidate outputs keyed by sample_id; a missing sample or section is
/// scored as an empty answer.
using Candidates = std::map<std::string, Sections>;

Candidates read_candidates(const std::filesystem::path& path);
void write_candidates(const Candidates& candidates, const std::filesystem::path& path);

BenchmarkReport run_benchmark(const std::vector<conversation::BenchmarkSample>& samples,
                              const Candidates& candidates, Judge& judge, const ExemplarLibrary& library,
                              const BenchmarkOptions& options = {});

/// scores.csv, aggregates.json, rejects.jsonl and failures.jsonl.
void write_report(const BenchmarkReport& report, const std::filesystem::path& dir);

json to_json(const AggregateResult& a);

}  // namespace medcorpus::eval
