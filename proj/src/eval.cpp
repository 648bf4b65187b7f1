#include "medcorpus/eval.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

namespace medcorpus::eval {

namespace {

std::set<std::u32string> char_grams(const std::string& text, std::size_t n) {
    const auto scalars = utf8_decode(trim(text));
    std::set<std::u32string> grams;
    if (scalars.empty()) return grams;
    if (scalars.size() < n) {
        grams.emplace(scalars.begin(), scalars.end());
        return grams;
    }
    for (std::size_t i = 0; i + n <= scalars.size(); ++i) grams.emplace(scalars.begin() + i, scalars.begin() + i + n);
    return grams;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string flatten_prompt(const conversation::Turn& turn) {
    std::string out;
    for (const auto& s : turn.segments) {
        out += s.kind == conversation::SegmentKind::Text ? std::string_view(s.text) : conversation::image_token;
    }
    return out;
}

json reject_to_json(const RejectRecord& r, const char* field) {
    return {{"sample_id", r.sample_id},
            {"task_kind", task_code(r.task)},
            {"component", r.component},
            {"metric", to_string(r.metric)},
            {"raw", r.raw},
            {field, r.error}};
}

struct Job {
    std::string sample_id;
    TaskKind task;
    std::string component;
    Metric metric;
    JudgeRequest request;
};

}  // namespace

std::string_view to_string(Metric m) { return m == Metric::Accuracy ? "accuracy" : "comprehensiveness"; }

Metric metric_from_string(std::string_view s) {
    if (s == "accuracy") return Metric::Accuracy;
    if (s == "comprehensiveness") return Metric::Comprehensiveness;
    throw ValidationError("unknown metric '" + std::string(s) + "'");
}

const std::string& key_component(TaskKind task) {
    const auto& outputs = task_output_labels(task);
    return is_imaging_task(task) ? outputs.at(1) : outputs.at(task == TaskKind::OutpatientRecord ? 0 : 1);
}

std::vector<EvalComponent> eval_components(TaskKind task) {
    std::vector<EvalComponent> out;
    const std::string& key = key_component(task);
    for (const auto& label : task_output_labels(task)) {
        EvalComponent c{task, label, {Metric::Accuracy}};
        if (label == key) c.metrics.push_back(Metric::Comprehensiveness);
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string ExemplarLibrary::key(TaskKind task, const std::string& component) {
    return std::string(task_name(task)) + "/" + component;
}

ExemplarLibrary ExemplarLibrary::builtin() {
    ExemplarLibrary lib;
    lib.rubrics_[Metric::Accuracy] =
        "You are an experienced pediatrician reviewing a model's answer. Rate the ACCURACY of the candidate "
        "answer against the reference answer on a scale from 0 to 5. 5 means every statement agrees with the "
        "reference; 0 means the answer is missing or entirely wrong. Penalize statements that contradict the "
        "reference.";
    lib.rubrics_[Metric::Comprehensiveness] =
        "You are an experienced pediatrician reviewing a model's answer. Rate the COMPREHENSIVENESS of the "
        "candidate answer against the reference answer on a scale from 0 to 5. 5 means every item in the "
        "reference is covered; 0 means none is. Do not penalize extra correct content.";

    struct Example {
        const char* reference;
        const char* candidate;
    };
    const std::map<std::string, Example> examples = {
        {"Findings", {"Increased bronchovascular markings in both lungs with patchy opacities in the right lower field.",
                      "Bilateral increased lung markings; no focal opacity."}},
        {"Impression", {"Bronchopneumonia.", "Bronchitis."}},
        {"Preliminary diagnosis", {"Acute upper respiratory infection; febrile convulsion.", "Upper respiratory infection."}},
        {"Treatment recommendation", {"Rest, oral fluids, recheck if fever persists beyond 3 days.", "Rest and fluids."}},
        {"Treatment plan", {"Ibuprofen suspension when temperature exceeds 38.5 C; complete blood count.", "Antipyretics."}},
        {"Diagnostic basis", {"Fever for 5 days with cough; coarse breath sounds; elevated CRP.", "Fever and cough."}},
        {"Admission diagnosis", {"Community-acquired pneumonia; mycoplasma infection.", "Pneumonia."}},
        {"Current diagnosis", {"Community-acquired pneumonia; mycoplasma infection.", "Pneumonia."}},
        {"Diagnostic and treatment plan", {"Azithromycin for 5 days, nebulization, monitor temperature and chest imaging.",
                                           "Antibiotics and observation."}},
    };
    for (TaskKind task : all_tasks) {
        for (const auto& label : task_output_labels(task)) {
            const Example& ex = examples.at(label);
            lib.exemplars_[key(task, label)] = {"Provide the " + label + " for the case.", ex.reference, ex.candidate,
                                                2, "The candidate is partially consistent with the reference but omits "
                                                   "important details."};
        }
    }
    return lib;
}

ExemplarLibrary ExemplarLibrary::load(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    StrictObject obj(j, "exemplar library");
    ExemplarLibrary lib;
    for (const auto& [metric, text] : obj.at("rubrics").items()) {
        lib.rubrics_[metric_from_string(metric)] = text.get<std::string>();
    }
    for (const auto& [key, value] : obj.at("exemplars").items()) {
        StrictObject e(value, "exemplar " + key);
        Exemplar ex{e.get<std::string>("question"), e.get<std::string>("reference"), e.get<std::string>("candidate"),
                    e.get<int>("score"), e.get<std::string>("reason")};
        e.finish();
        if (ex.score < 0 || ex.score > 5) throw ValidationError("exemplar " + key + ": score must be in [0, 5]");
        lib.exemplars_[key] = std::move(ex);
    }
    obj.finish();
    return lib;
}

json ExemplarLibrary::to_json() const {
    json rubrics = json::object();
    for (const auto& [m, text] : rubrics_) rubrics[std::string(eval::to_string(m))] = text;
    json exemplars = json::object();
    for (const auto& [k, e] : exemplars_) {
        exemplars[k] = {{"question", e.question}, {"reference", e.reference}, {"candidate", e.candidate},
                        {"score", e.score},       {"reason", e.reason}};
    }
    return {{"rubrics", rubrics}, {"exemplars", exemplars}};
}

const Exemplar& ExemplarLibrary::exemplar(TaskKind task, const std::string& component) const {
    const std::string k = key(task, component);
    const auto it = exemplars_.find(k);
    if (it == exemplars_.end()) throw ValidationError("exemplar library has no entry for '" + k + "'");
    return it->second;
}

const std::string& ExemplarLibrary::rubric(Metric metric) const {
    const auto it = rubrics_.find(metric);
    if (it == rubrics_.end()) {
        throw ValidationError("exemplar library has no rubric for '" + std::string(to_string(metric)) + "'");
    }
    return it->second;
}

void ExemplarLibrary::set_exemplar(TaskKind task, const std::string& component, Exemplar e) {
    exemplars_[key(task, component)] = std::move(e);
}

void ExemplarLibrary::set_rubric(Metric metric, std::string text) { rubrics_[metric] = std::move(text); }

void ExemplarLibrary::erase_exemplar(TaskKind task, const std::string& component) {
    exemplars_.erase(key(task, component));
}

// ---------------------------------------------------------------------------

JudgeRequest build_judge_prompt(const EvalComponent& component, Metric metric, const ExemplarLibrary& library,
                                const std::string& question, const std::string& reference,
                                const std::string& candidate) {
    const Exemplar& ex = library.exemplar(component.task, component.component);
    std::string p;
    p += library.rubric(metric);
    p += "\n\nExample:\n";
    p += "Question: " + ex.question + "\n";
    p += "Reference answer: " + ex.reference + "\n";
    p += "Candidate answer: " + ex.candidate + "\n";
    p += "Score: " + std::to_string(ex.score) + "\n";
    p += "Reason: " + ex.reason + "\n\n";
    p += "Now rate the " + component.component + " section.\n";
    p += "Question: " + question + "\n";
    p += "Reference answer: " + reference + "\n";
    p += "Candidate answer: " + candidate + "\n\n";
    p += "Respond in the format:\nScore: <integer>\nReason: <text>\n";
    JudgeRequest r;
    r.prompt = std::move(p);
    r.metric = metric;
    r.reference = reference;
    r.candidate = candidate;
    return r;
}

ParsedScore parse_score(const std::string& out) {
    const std::size_t marker = out.find("Score:");
    if (marker == std::string::npos) throw UnscorableOutput("judge output has no 'Score:' marker");
    std::size_t pos = marker + 6;
    while (pos < out.size() && (out[pos] == ' ' || out[pos] == '\t')) ++pos;
    const bool negative = pos < out.size() && out[pos] == '-';
    if (negative) ++pos;
    std::size_t end = pos;
    while (end < out.size() && out[end] >= '0' && out[end] <= '9') ++end;
    if (end == pos) throw UnscorableOutput("no integer follows 'Score:'");
    if (negative || end - pos > 2) throw UnscorableOutput("score outside [0, 5]: " + out.substr(marker, end - marker));
    if (end + 1 < out.size() && out[end] == '.' && out[end + 1] >= '0' && out[end + 1] <= '9') {
        throw UnscorableOutput("score is not an integer: " + out.substr(marker, end + 2 - marker));
    }
    const int score = std::stoi(out.substr(pos, end - pos));
    if (score > 5) throw UnscorableOutput("score outside [0, 5]: " + std::to_string(score));
    ParsedScore parsed{score, {}};
    const std::size_t reason = out.find("Reason:", end);
    if (reason != std::string::npos) parsed.rationale = std::string(trim(std::string_view(out).substr(reason + 7)));
    return parsed;
}

double t_quantile_975(double dof) {
    if (!(dof > 0)) throw ValidationError("t quantile: degrees of freedom must be positive");
    return boost::math::quantile(boost::math::students_t_distribution<double>(dof), 0.975);
}

AggregateResult aggregate(const std::vector<double>& scores) {
    if (scores.empty()) throw ValidationError("aggregate: no scores");
    AggregateResult r;
    r.n = scores.size();
    r.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(r.n);
    if (r.n == 1) return r;
    double ss = 0.0;
    for (double s : scores) ss += (s - r.mean) * (s - r.mean);
    const double sd = std::sqrt(ss / static_cast<double>(r.n - 1));
    const double half = t_quantile_975(static_cast<double>(r.n - 1)) * sd / std::sqrt(static_cast<double>(r.n));
    r.sd = sd;
    r.ci_low = r.mean - half;
    r.ci_high = r.mean + half;
    return r;
}

json to_json(const AggregateResult& a) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {{"n", a.n}, {"mean", a.mean}, {"sd", opt(a.sd)}, {"ci_low", opt(a.ci_low)}, {"ci_high", opt(a.ci_high)}};
}

// ---------------------------------------------------------------------------

double stub_overlap(const std::string& reference, const std::string& candidate, Metric metric) {
    if (is_blank(candidate)) return 0.0;
    if (trim(reference) == trim(candidate)) return 1.0;
    const auto ref = char_grams(reference, 3);
    const auto cand = char_grams(candidate, 3);
    std::size_t common = 0;
    for (const auto& g : cand) common += ref.contains(g) ? 1 : 0;
    if (metric == Metric::Comprehensiveness) {
        return ref.empty() ? 0.0 : static_cast<double>(common) / static_cast<double>(ref.size());
    }
    const std::size_t uni = ref.size() + cand.size() - common;
    return uni == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(uni);
}

std::string StubJudge::complete(const JudgeRequest& request) {
    const double overlap = stub_overlap(request.reference, request.candidate, request.metric);
    const int score = static_cast<int>(std::lround(overlap * 5.0));
    char buf[96];
    std::snprintf(buf, sizeof buf, "Score: %d\nReason: character 3-gram overlap %.4f", score, overlap);
    return buf;
}

HttpJudge::HttpJudge(HttpJudgeOptions options) : options_(std::move(options)) {
    const std::string& url = options_.url;
    const std::size_t scheme = url.find("://");
    if (scheme == std::string::npos) throw ValidationError("judge url must include a scheme: " + url);
    const std::size_t slash = url.find('/', scheme + 3);
    base_ = url.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : url.substr(slash);
    if (options_.max_retries < 0) throw ValidationError("judge: max_retries must be >= 0");
}

std::string HttpJudge::complete(const JudgeRequest& request) {
    const json body = {{"prompt", request.prompt},
                       {"max_tokens", request.max_tokens},
                       {"temperature", request.temperature}};
    auto backoff = options_.initial_backoff;
    std::string last_error;
    for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        httplib::Client client(base_);
        client.set_connection_timeout(options_.timeout);
        client.set_read_timeout(options_.timeout);
        const auto res = client.Post(path_, body.dump(), "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
            if (res->status >= 400 && res->status < 500 && res->status != 429) break;
            continue;
        }
        try {
            return json::parse(res->body).at("text").get<std::string>();
        } catch (const json::exception& e) {
            last_error = std::string("malformed response: ") + e.what();
        }
    }
    throw JudgeUnavailable("judge request failed after retries: " + last_error);
}

// ---------------------------------------------------------------------------

Candidates read_candidates(const std::filesystem::path& path) {
    Candidates out;
    const auto lines = split_lines(read_file(path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (is_blank(lines[i])) continue;
        try {
            const json parsed = json::parse(lines[i]);
            StrictObject obj(parsed, "candidate");
            Sections sections;
            for (const auto& s : obj.at("sections")) {
                StrictObject so(s, "candidate section");
                sections.push_back({so.get<std::string>("label"), so.get<std::string>("text")});
                so.finish();
            }
            const auto id = obj.get<std::string>("sample_id");
            obj.finish();
            if (!out.emplace(id, std::move(sections)).second) {
                throw ValidationError("duplicate candidate for sample " + id);
            }
        } catch (const json::exception& e) {
            throw ParseError(path.string(), i + 1, e.what());
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), i + 1, e.what());
        }
    }
    return out;
}

void write_candidates(const Candidates& candidates, const std::filesystem::path& path) {
    std::string out;
    for (const auto& [id, sections] : candidates) {
        json secs = json::array();
        for (const auto& s : sections) secs.push_back({{"label", s.label}, {"text", s.text}});
        out += to_jsonl_line({{"sample_id", id}, {"sections", secs}});
    }
    write_file(path, out);
}

BenchmarkReport run_benchmark(const std::vector<conversation::BenchmarkSample>& samples,
                              const Candidates& candidates, Judge& judge, const ExemplarLibrary& library,
                              const BenchmarkOptions& options) {
    if (options.max_in_flight == 0) throw ValidationError("benchmark: max_in_flight must be >= 1");
    std::vector<const conversation::BenchmarkSample*> ordered;
    for (const auto& s : samples) ordered.push_back(&s);
    std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->sample_id < b->sample_id; });

    std::vector<Job> jobs;
    for (const auto* sample : ordered) {
        const std::string question = flatten_prompt(sample->prompt);
        const auto cand_it = candidates.find(sample->sample_id);
        for (const auto& component : eval_components(sample->task_kind)) {
            const std::string* ref = find_section(sample->reference, component.component);
            const std::string* cand =
                cand_it == candidates.end() ? nullptr : find_section(cand_it->second, component.component);
            for (Metric metric : component.metrics) {
                JudgeRequest req = build_judge_prompt(component, metric, library, question, ref ? *ref : "",
                                                      cand ? *cand : "");
                req.max_tokens = options.max_tokens;
                req.temperature = options.temperature;
                jobs.push_back({sample->sample_id, sample->task_kind, component.component, metric, std::move(req)});
            }
        }
    }

    struct Outcome {
        bool ok = false;
        std::string text;
    };
    std::vector<Outcome> outcomes(jobs.size());
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> workers;
        const std::size_t n = std::min(options.max_in_flight, std::max<std::size_t>(jobs.size(), 1));
        for (std::size_t w = 0; w < n; ++w) {
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < jobs.size(); i = next++) {
                    try {
                        outcomes[i] = {true, judge.complete(jobs[i].request)};
                    } catch (const std::exception& e) {
                        outcomes[i] = {false, e.what()};
                    }
                }
            });
        }
    }

    BenchmarkReport report;
    report.requested = jobs.size();
    std::map<std::tuple<TaskKind, std::string, Metric>, std::vector<double>> buckets;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const Job& job = jobs[i];
        if (!outcomes[i].ok) {
            report.failures.push_back({job.sample_id, job.task, job.component, job.metric, "", outcomes[i].text});
            continue;
        }
        try {
            const ParsedScore parsed = parse_score(outcomes[i].text);
            report.scores.push_back(
                {job.sample_id, job.task, job.component, job.metric, parsed.score, parsed.rationale, outcomes[i].text});
            buckets[{job.task, job.component, job.metric}].push_back(parsed.score);
        } catch (const UnscorableOutput& e) {
            report.rejects.push_back({job.sample_id, job.task, job.component, job.metric, outcomes[i].text, e.what()});
        }
    }

    std::map<Metric, std::map<TaskKind, std::vector<double>>> per_task;
    for (const auto& [key, values] : buckets) {
        const auto& [task, component, metric] = key;
        GroupAggregate g{task, component, metric, aggregate(values)};
        per_task[metric][task].push_back(g.result.mean);
        report.groups.push_back(std::move(g));
    }
    for (const auto& [metric, tasks] : per_task) {
        double sum = 0.0;
        for (const auto& [task, means] : tasks) {
            sum += std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
        }
        report.overall[metric] = sum / static_cast<double>(tasks.size());
    }
    return report;
}

void write_report(const BenchmarkReport& report, const std::filesystem::path& dir) {
    std::ostringstream csv;
    csv << "sample_id,task,component,metric,score,rationale\n";
    for (const auto& s : report.scores) {
        csv << csv_field(s.sample_id) << ',' << task_code(s.task) << ',' << csv_field(s.component) << ','
            << to_string(s.metric) << ',' << s.score << ',' << csv_field(s.rationale) << '\n';
    }
    write_file(dir / "scores.csv", csv.str());

    json groups = json::array();
    for (const auto& g : report.groups) {
        json entry = to_json(g.result);
        entry["task_kind"] = task_code(g.task);
        entry["task"] = task_name(g.task);
        entry["component"] = g.component;
        entry["metric"] = to_string(g.metric);
        groups.push_back(std::move(entry));
    }
    json overall = json::object();
    for (const auto& [metric, value] : report.overall) overall[std::string(to_string(metric))] = value;
    const json agg = {{"groups", groups},
                      {"overall", overall},
                      {"requested", report.requested},
                      {"scored", report.scores.size()},
                      {"rejected", report.rejects.size()},
                      {"failed", report.failures.size()}};
    write_file(dir / "aggregates.json", agg.dump(2) + "\n");

    std::string rejects, failures;
    for (const auto& r : report.rejects) rejects += to_jsonl_line(reject_to_json(r, "error"));
    for (const auto& r : report.failures) failures += to_jsonl_line(reject_to_json(r, "error"));
    write_file(dir / "rejects.jsonl", rejects);
    write_file(dir / "failures.jsonl", failures);
}

}  // namespace medcorpus::eval
