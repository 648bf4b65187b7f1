#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "medcorpus/corpus.hpp"
#include "medcorpus/sampling.hpp"

namespace medcorpus::conversation {

/// Serialized end-of-turn marker.
inline constexpr std::string_view stop_marker = "⟨STOP⟩";
/// How an image placeholder appears in rendered text.
inline constexpr std::string_view image_token = "<image>";

enum class SegmentKind { Text, Image };

struct Segment {
    SegmentKind kind = SegmentKind::Text;
    std::string text;
    std::string image_ref;

    static Segment text_segment(std::string text) { return {SegmentKind::Text, std::move(text), {}}; }
    static Segment image_segment(std::string ref) { return {SegmentKind::Image, {}, std::move(ref)}; }

    bool operator==(const Segment&) const = default;
};

enum class Speaker { Human, Assistant };

struct Turn {
    Speaker speaker = Speaker::Human;
    std::vector<Segment> segments;

    bool operator==(const Turn&) const = default;
};

struct ConversationInstance {
    std::string instance_id;
    TaskKind task_kind = TaskKind::OutpatientRecord;
    /// Record or study ids this instance was built from, in round order.
    std::vector<std::string> source_ids;
    std::vector<Turn> turns;
    /// Indices of turns whose text and stop marker contribute to the loss.
    std::vector<std::size_t> loss_turns;
    std::int64_t token_count = 0;

    bool operator==(const ConversationInstance&) const = default;
};

json to_json(const ConversationInstance& instance);
ConversationInstance instance_from_json(const json& j);

// ---------------------------------------------------------------------------
// Templates

struct PromptTemplate {
    std::string header;
    std::string closing;
    /// Placeholder shown after each output marker, in output-section order.
    std::vector<std::string> output_placeholders;

    bool operator==(const PromptTemplate&) const = default;
};

class TemplateLibrary {
public:
    /// English templates for all six tasks.
    static TemplateLibrary builtin();
    /// Reads `<task_name>.json` for every task from `dir`.
    static TemplateLibrary load(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;

    const PromptTemplate& at(TaskKind task) const;
    void set(TaskKind task, PromptTemplate tmpl);

private:
    std::map<TaskKind, PromptTemplate> templates_;
};

json to_json(const PromptTemplate& t);
PromptTemplate template_from_json(const json& j, TaskKind task);

// ---------------------------------------------------------------------------
// Builders

/// Image references for a study, one per placeholder. The default uses the
/// raw series tensor refs in series-kind order.
using ImageResolver = std::function<std::vector<std::string>(const RadiologyStudy&)>;
std::vector<std::string> raw_series_refs(const RadiologyStudy& study);

Turn build_prompt(const ClinicalRecord& record, const TemplateLibrary& templates);
Turn build_prompt(const RadiologyStudy& study, const TemplateLibrary& templates,
                  const ImageResolver& images = raw_series_refs);

/// "[Label] text" lines in template order. Throws IncompleteRecord when an
/// output section is missing or blank.
Turn build_target(const ClinicalRecord& record);
Turn build_target(const RadiologyStudy& study);

/// Recovers the input sections from a rendered prompt. Image placeholders
/// are reported as a section with the placeholder tokens as its text.
Sections parse_prompt(const Turn& prompt, TaskKind task, const TemplateLibrary& templates);

// ---------------------------------------------------------------------------
// Assembly

ConversationInstance assemble_single(const ClinicalRecord& record, const TemplateLibrary& templates);
ConversationInstance assemble_single(const RadiologyStudy& study, const TemplateLibrary& templates,
                                     const ImageResolver& images = raw_series_refs);

/// One round per study in ascending (exam_time, study_id) order. A single
/// study delegates to assemble_single. Throws ValidationError on an empty
/// list, mixed modality or mixed patients.
ConversationInstance assemble_interleaved(std::vector<RadiologyStudy> studies, const TemplateLibrary& templates,
                                          const ImageResolver& images = raw_series_refs);

struct RenderedInstance {
    std::string text;
    /// Byte ranges [begin, end) covered by the loss.
    std::vector<std::pair<std::size_t, std::size_t>> loss_spans;
};

/// "Human: ... ⟨STOP⟩ Assistant: ... ⟨STOP⟩" with each assistant body and
/// its stop marker marked as loss.
RenderedInstance render_with_mask(const ConversationInstance& instance);

/// True when turns alternate starting with HUMAN, assistant turns are text
/// only, and loss_turns lists exactly the assistant turns.
bool loss_mask_is_exact(const ConversationInstance& instance);

// ---------------------------------------------------------------------------
// Token budget

enum class TokenScheme { UnicodeChars, WhitespaceWords };

struct TokenCounter {
    TokenScheme scheme = TokenScheme::UnicodeChars;
    std::int64_t image_token_cost = 32;

    void validate() const;
};

json to_json(const TokenCounter& c);
TokenCounter counter_from_json(const json& j);

std::int64_t count_tokens(const ConversationInstance& instance, const TokenCounter& counter);
std::int64_t count_tokens(const Turn& turn, const TokenCounter& counter);

template <typename T>
struct Partition {
    std::vector<T> kept;
    std::vector<T> dropped;
};

/// Kept iff token_count <= max_tokens.
Partition<ConversationInstance> filter_by_budget(std::vector<ConversationInstance> instances,
                                                 std::int64_t max_tokens = 4000);

/// Kept iff every output section of the record's task is present and
/// non-blank after trimming.
Partition<ClinicalRecord> drop_incomplete(std::vector<ClinicalRecord> records);

// ---------------------------------------------------------------------------
// Stage assembly

struct AssembleOptions {
    TokenCounter counter;
    std::int64_t max_tokens = 4000;
    /// Join same-patient, same-modality studies into interleaved instances.
    bool interleave = true;
};

struct AssembleReport {
    std::vector<ConversationInstance> instances;
    std::size_t incomplete = 0;
    std::size_t over_budget = 0;
    std::vector<std::string> dropped_ids;
};

/// Builds training instances for a stage selection, sorted by instance_id.
AssembleReport assemble_selection(const Corpus& corpus, const sampling::SelectionResult& selection,
                                  const TemplateLibrary& templates, const AssembleOptions& options,
                                  const ImageResolver& images = raw_series_refs);

struct BenchmarkSample {
    std::string sample_id;
    TaskKind task_kind = TaskKind::OutpatientRecord;
    Turn prompt;
    Sections reference;

    bool operator==(const BenchmarkSample&) const = default;
};

json to_json(const BenchmarkSample& sample);
BenchmarkSample benchmark_from_json(const json& j);

/// One sample per test id, sorted by sample_id.
std::vector<BenchmarkSample> build_benchmark(const Corpus& corpus, const std::map<TaskKind, std::vector<std::string>>& test_ids,
                                             const TemplateLibrary& templates,
                                             const ImageResolver& images = raw_series_refs);

}  // namespace medcorpus::conversation
