#include "medcorpus/conversation.hpp"

#include <algorithm>
#include <unordered_map>

namespace medcorpus::conversation {

namespace {

std::string_view modality_display(Modality m) { return m == Modality::Xray ? "X-ray" : "CT"; }

std::string_view speaker_name(Speaker s) { return s == Speaker::Human ? "HUMAN" : "ASSISTANT"; }

Speaker speaker_from_name(std::string_view s) {
    if (s == "HUMAN") return Speaker::Human;
    if (s == "ASSISTANT") return Speaker::Assistant;
    throw ValidationError("turn: unknown speaker '" + std::string(s) + "'");
}

json segment_to_json(const Segment& s) {
    if (s.kind == SegmentKind::Text) return {{"kind", "TEXT"}, {"text", s.text}};
    return {{"kind", "IMAGE_PLACEHOLDER"}, {"image_ref", s.image_ref}};
}

Segment segment_from_json(const json& j) {
    StrictObject obj(j, "segment");
    const auto kind = obj.get<std::string>("kind");
    Segment s;
    if (kind == "TEXT") {
        s = Segment::text_segment(obj.get<std::string>("text"));
    } else if (kind == "IMAGE_PLACEHOLDER") {
        s = Segment::image_segment(obj.get<std::string>("image_ref"));
    } else {
        throw ValidationError("segment: unknown kind '" + kind + "'");
    }
    obj.finish();
    return s;
}

json turn_to_json(const Turn& t) {
    json segs = json::array();
    for (const auto& s : t.segments) segs.push_back(segment_to_json(s));
    return {{"speaker", speaker_name(t.speaker)}, {"segments", segs}, {"stop", stop_marker}};
}

Turn turn_from_json(const json& j) {
    StrictObject obj(j, "turn");
    Turn t;
    t.speaker = speaker_from_name(obj.get<std::string>("speaker"));
    for (const auto& s : obj.at("segments")) t.segments.push_back(segment_from_json(s));
    if (obj.get<std::string>("stop") != stop_marker) throw ValidationError("turn: unexpected stop marker");
    obj.finish();
    return t;
}

json sections_to_json(const Sections& sections) {
    json out = json::array();
    for (const auto& s : sections) out.push_back({{"label", s.label}, {"text", s.text}});
    return out;
}

Sections sections_from_json(const json& j) {
    Sections out;
    for (const auto& item : j) {
        StrictObject obj(item, "section");
        out.push_back({obj.get<std::string>("label"), obj.get<std::string>("text")});
        obj.finish();
    }
    return out;
}

std::string flatten(const Turn& turn) {
    std::string out;
    for (const auto& s : turn.segments) {
        out += s.kind == SegmentKind::Text ? std::string_view(s.text) : image_token;
    }
    return out;
}

void append_closing(std::string& text, TaskKind task, const PromptTemplate& tmpl) {
    text += tmpl.closing;
    text += '\n';
    const auto& outputs = task_output_labels(task);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        text += "[" + outputs[i] + "] " + tmpl.output_placeholders.at(i) + "\n";
    }
}

Sections study_outputs(const RadiologyStudy& study) {
    const auto& labels = task_output_labels(task_for_modality(study.modality));
    return {{labels.at(0), study.findings}, {labels.at(1), study.impression}};
}

Turn target_from_sections(const Sections& outputs, TaskKind task, const std::string& id) {
    std::string text;
    for (const auto& label : task_output_labels(task)) {
        const std::string* value = find_section(outputs, label);
        if (value == nullptr || is_blank(*value)) {
            throw IncompleteRecord(id + ": output section '" + label + "' is missing or blank");
        }
        if (!text.empty()) text += '\n';
        text += "[" + label + "] " + *value;
    }
    return {Speaker::Assistant, {Segment::text_segment(std::move(text))}};
}

void require_task_template(const PromptTemplate& t, TaskKind task) {
    if (t.output_placeholders.size() != task_output_labels(task).size()) {
        throw ValidationError("template for " + std::string(task_name(task)) + ": expected " +
                              std::to_string(task_output_labels(task).size()) + " output placeholders");
    }
}

std::int64_t count_text(std::string_view text, TokenScheme scheme) {
    if (scheme == TokenScheme::UnicodeChars) return static_cast<std::int64_t>(utf8_length(text));
    std::int64_t words = 0;
    bool in_word = false;
    for (char c : text) {
        const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
        if (!space && !in_word) ++words;
        in_word = !space;
    }
    return words;
}

}  // namespace

// ---------------------------------------------------------------------------

json to_json(const ConversationInstance& inst) {
    json turns = json::array();
    for (const auto& t : inst.turns) turns.push_back(turn_to_json(t));
    return {{"instance_id", inst.instance_id}, {"task_kind", task_code(inst.task_kind)},
            {"source_ids", inst.source_ids},   {"turns", turns},
            {"loss_turns", inst.loss_turns},   {"token_count", inst.token_count}};
}

ConversationInstance instance_from_json(const json& j) {
    StrictObject obj(j, "instance");
    ConversationInstance inst;
    inst.instance_id = obj.get<std::string>("instance_id");
    inst.task_kind = task_from_code(obj.get<int>("task_kind"));
    inst.source_ids = obj.get<std::vector<std::string>>("source_ids");
    for (const auto& t : obj.at("turns")) inst.turns.push_back(turn_from_json(t));
    inst.loss_turns = obj.get<std::vector<std::size_t>>("loss_turns");
    inst.token_count = obj.get<std::int64_t>("token_count");
    obj.finish();
    return inst;
}

// ---------------------------------------------------------------------------

TemplateLibrary TemplateLibrary::builtin() {
    const std::string radiology_header = "Current radiological data is as follows:";
    const std::string radiology_closing =
        "Based on the above information, combined with professional radiological knowledge, generate a report in "
        "the format:";
    const std::string medical_closing =
        "Based on the above information, combined with professional medical knowledge, make a diagnosis in the "
        "format:";
    const std::string inpatient_header = "Current inpatient pediatric information is as follows:";
    const PromptTemplate radiology{radiology_header,
                                   radiology_closing,
                                   {"{Your findings based on the images}", "{Your impression based on the images}"}};
    TemplateLibrary lib;
    lib.templates_[TaskKind::XrayReport] = radiology;
    lib.templates_[TaskKind::CtReport] = radiology;
    lib.templates_[TaskKind::OutpatientRecord] = {
        "Current outpatient pediatric information is as follows:",
        medical_closing,
        {"{Your preliminary diagnosis}", "{Your treatment recommendation}", "{Your treatment plan}"}};
    lib.templates_[TaskKind::FirstCourse] = {
        inpatient_header,
        medical_closing,
        {"{Your diagnostic basis}", "{Your admission diagnosis}", "{Your diagnostic and treatment plan}"}};
    const PromptTemplate rounds{
        inpatient_header,
        medical_closing,
        {"{Your diagnostic basis}", "{Your current diagnosis}", "{Your diagnostic and treatment plan}"}};
    lib.templates_[TaskKind::AttendingRound] = rounds;
    lib.templates_[TaskKind::ChiefRound] = rounds;
    return lib;
}

TemplateLibrary TemplateLibrary::load(const std::filesystem::path& dir) {
    TemplateLibrary lib;
    for (TaskKind task : all_tasks) {
        const auto path = dir / (std::string(task_name(task)) + ".json");
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::parse_error& e) {
            throw ValidationError(path.string() + ": " + e.what());
        }
        lib.set(task, template_from_json(j, task));
    }
    return lib;
}

void TemplateLibrary::save(const std::filesystem::path& dir) const {
    for (const auto& [task, tmpl] : templates_) {
        write_file(dir / (std::string(task_name(task)) + ".json"), to_json(tmpl).dump(2) + "\n");
    }
}

const PromptTemplate& TemplateLibrary::at(TaskKind task) const {
    const auto it = templates_.find(task);
    if (it == templates_.end()) throw ValidationError("no template for task " + std::string(task_name(task)));
    return it->second;
}

void TemplateLibrary::set(TaskKind task, PromptTemplate tmpl) {
    require_task_template(tmpl, task);
    templates_[task] = std::move(tmpl);
}

json to_json(const PromptTemplate& t) {
    return {{"header", t.header}, {"closing", t.closing}, {"output_placeholders", t.output_placeholders}};
}

PromptTemplate template_from_json(const json& j, TaskKind task) {
    StrictObject obj(j, "template " + std::string(task_name(task)));
    PromptTemplate t{obj.get<std::string>("header"), obj.get<std::string>("closing"),
                     obj.get<std::vector<std::string>>("output_placeholders")};
    obj.finish();
    require_task_template(t, task);
    return t;
}

// ---------------------------------------------------------------------------

std::vector<std::string> raw_series_refs(const RadiologyStudy& study) {
    std::vector<const ImageSeries*> series;
    for (const auto& s : study.series) series.push_back(&s);
    std::stable_sort(series.begin(), series.end(),
                     [](const ImageSeries* a, const ImageSeries* b) { return a->kind < b->kind; });
    std::vector<std::string> refs;
    for (const auto* s : series) refs.push_back(s->tensor_ref);
    return refs;
}

Turn build_prompt(const ClinicalRecord& record, const TemplateLibrary& templates) {
    const PromptTemplate& tmpl = templates.at(record.task_kind);
    std::string text = tmpl.header + "\n";
    for (const auto& label : task_input_labels(record.task_kind)) {
        const std::string* value = find_section(record.input_sections, label);
        if (value == nullptr) throw IncompleteRecord(record.record_id + ": input section '" + label + "' is missing");
        text += "[" + label + "] " + *value + "\n";
    }
    append_closing(text, record.task_kind, tmpl);
    return {Speaker::Human, {Segment::text_segment(std::move(text))}};
}

Turn build_prompt(const RadiologyStudy& study, const TemplateLibrary& templates, const ImageResolver& images) {
    const TaskKind task = task_for_modality(study.modality);
    const PromptTemplate& tmpl = templates.at(task);
    const auto& labels = task_input_labels(task);
    const auto refs = images(study);
    if (refs.empty()) throw IncompleteRecord(study.study_id + ": no images");

    std::string head = tmpl.header + "\n";
    head += "[" + labels.at(0) + "] " + format_long_date(study.exam_time) + "\n";
    head += "[" + labels.at(1) + "] " + std::string(modality_display(study.modality)) + "\n";
    head += "[" + labels.at(2) + "] ";
    Turn turn{Speaker::Human, {Segment::text_segment(std::move(head))}};
    for (const auto& ref : refs) turn.segments.push_back(Segment::image_segment(ref));
    std::string tail = "\n";
    append_closing(tail, task, tmpl);
    turn.segments.push_back(Segment::text_segment(std::move(tail)));
    return turn;
}

Turn build_target(const ClinicalRecord& record) {
    return target_from_sections(record.output_sections, record.task_kind, record.record_id);
}

Turn build_target(const RadiologyStudy& study) {
    return target_from_sections(study_outputs(study), task_for_modality(study.modality), study.study_id);
}

Sections parse_prompt(const Turn& prompt, TaskKind task, const TemplateLibrary& templates) {
    const PromptTemplate& tmpl = templates.at(task);
    const std::string text = flatten(prompt);
    const auto& labels = task_input_labels(task);
    auto fail = [&](const std::string& what) { return ValidationError("parse_prompt: " + what); };

    if (text.rfind(tmpl.header + "\n", 0) != 0) throw fail("header not found");
    const std::string closing = "\n" + tmpl.closing + "\n";
    const std::size_t closing_at = text.rfind(closing);
    if (closing_at == std::string::npos) throw fail("closing instruction not found");

    Sections out;
    std::size_t pos = tmpl.header.size() + 1;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::string marker = "[" + labels[i] + "] ";
        if (text.compare(pos, marker.size(), marker) != 0) throw fail("expected marker " + marker);
        pos += marker.size();
        std::size_t end = closing_at;
        if (i + 1 < labels.size()) {
            end = text.find("\n[" + labels[i + 1] + "] ", pos);
            if (end == std::string::npos || end > closing_at) throw fail("marker for " + labels[i + 1] + " not found");
        }
        out.push_back({labels[i], text.substr(pos, end - pos)});
        pos = end + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------

ConversationInstance assemble_single(const ClinicalRecord& record, const TemplateLibrary& templates) {
    ConversationInstance inst;
    inst.instance_id = record.record_id;
    inst.task_kind = record.task_kind;
    inst.source_ids = {record.record_id};
    inst.turns = {build_prompt(record, templates), build_target(record)};
    inst.loss_turns = {1};
    return inst;
}

ConversationInstance assemble_single(const RadiologyStudy& study, const TemplateLibrary& templates,
                                     const ImageResolver& images) {
    ConversationInstance inst;
    inst.instance_id = study.study_id;
    inst.task_kind = task_for_modality(study.modality);
    inst.source_ids = {study.study_id};
    inst.turns = {build_prompt(study, templates, images), build_target(study)};
    inst.loss_turns = {1};
    return inst;
}

ConversationInstance assemble_interleaved(std::vector<RadiologyStudy> studies, const TemplateLibrary& templates,
                                          const ImageResolver& images) {
    if (studies.empty()) throw ValidationError("assemble_interleaved: no studies");
    for (const auto& s : studies) {
        if (s.modality != studies.front().modality) {
            throw ValidationError("assemble_interleaved: mixed modalities (" + studies.front().study_id + ", " +
                                  s.study_id + ")");
        }
        if (s.patient_id != studies.front().patient_id) {
            throw ValidationError("assemble_interleaved: studies belong to different patients");
        }
    }
    if (studies.size() == 1) return assemble_single(studies.front(), templates, images);
    std::sort(studies.begin(), studies.end(), [](const RadiologyStudy& a, const RadiologyStudy& b) {
        return std::tie(a.exam_time, a.study_id) < std::tie(b.exam_time, b.study_id);
    });
    ConversationInstance inst;
    inst.task_kind = task_for_modality(studies.front().modality);
    for (const auto& s : studies) {
        if (!inst.instance_id.empty()) inst.instance_id += '+';
        inst.instance_id += s.study_id;
        inst.source_ids.push_back(s.study_id);
        inst.turns.push_back(build_prompt(s, templates, images));
        inst.turns.push_back(build_target(s));
        inst.loss_turns.push_back(inst.turns.size() - 1);
    }
    return inst;
}

RenderedInstance render_with_mask(const ConversationInstance& inst) {
    RenderedInstance out;
    for (const auto& turn : inst.turns) {
        if (!out.text.empty()) out.text += ' ';
        out.text += turn.speaker == Speaker::Human ? "Human: " : "Assistant: ";
        const std::size_t begin = out.text.size();
        out.text += flatten(turn);
        out.text += ' ';
        out.text += stop_marker;
        if (turn.speaker == Speaker::Assistant) out.loss_spans.emplace_back(begin, out.text.size());
    }
    return out;
}

bool loss_mask_is_exact(const ConversationInstance& inst) {
    std::vector<std::size_t> assistant;
    for (std::size_t i = 0; i < inst.turns.size(); ++i) {
        const Turn& t = inst.turns[i];
        const Speaker expected = i % 2 == 0 ? Speaker::Human : Speaker::Assistant;
        if (t.speaker != expected) return false;
        if (t.speaker == Speaker::Assistant) {
            for (const auto& s : t.segments) {
                if (s.kind != SegmentKind::Text) return false;
            }
            assistant.push_back(i);
        }
    }
    return inst.loss_turns == assistant;
}

// ---------------------------------------------------------------------------

void TokenCounter::validate() const {
    if (image_token_cost < 1) throw ValidationError("token counter: image_token_cost must be >= 1");
}

json to_json(const TokenCounter& c) {
    return {{"scheme", c.scheme == TokenScheme::UnicodeChars ? "unicode_chars" : "whitespace_words"},
            {"image_token_cost", c.image_token_cost}};
}

TokenCounter counter_from_json(const json& j) {
    StrictObject obj(j, "token_counter");
    TokenCounter c;
    const auto scheme = obj.get_or<std::string>("scheme", "unicode_chars");
    if (scheme == "unicode_chars") {
        c.scheme = TokenScheme::UnicodeChars;
    } else if (scheme == "whitespace_words") {
        c.scheme = TokenScheme::WhitespaceWords;
    } else {
        throw ValidationError("token_counter.scheme: unknown scheme '" + scheme + "'");
    }
    c.image_token_cost = obj.get_or<std::int64_t>("image_token_cost", c.image_token_cost);
    obj.finish();
    c.validate();
    return c;
}

std::int64_t count_tokens(const Turn& turn, const TokenCounter& counter) {
    std::int64_t n = 0;
    for (const auto& s : turn.segments) {
        n += s.kind == SegmentKind::Text ? count_text(s.text, counter.scheme) : counter.image_token_cost;
    }
    return n;
}

std::int64_t count_tokens(const ConversationInstance& inst, const TokenCounter& counter) {
    std::int64_t n = 0;
    for (const auto& t : inst.turns) n += count_tokens(t, counter);
    return n;
}

Partition<ConversationInstance> filter_by_budget(std::vector<ConversationInstance> instances,
                                                 std::int64_t max_tokens) {
    Partition<ConversationInstance> out;
    for (auto& inst : instances) {
        (inst.token_count <= max_tokens ? out.kept : out.dropped).push_back(std::move(inst));
    }
    return out;
}

Partition<ClinicalRecord> drop_incomplete(std::vector<ClinicalRecord> records) {
    Partition<ClinicalRecord> out;
    for (auto& r : records) {
        bool complete = true;
        for (const auto& label : task_output_labels(r.task_kind)) {
            const std::string* value = find_section(r.output_sections, label);
            if (value == nullptr || is_blank(*value)) {
                complete = false;
                break;
            }
        }
        (complete ? out.kept : out.dropped).push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------

AssembleReport assemble_selection(const Corpus& corpus, const sampling::SelectionResult& selection,
                                  const TemplateLibrary& templates, const AssembleOptions& options,
                                  const ImageResolver& images) {
    options.counter.validate();
    std::unordered_map<std::string_view, const RadiologyStudy*> studies;
    for (const auto& s : corpus.studies) studies.emplace(s.study_id, &s);
    std::unordered_map<std::string_view, const ClinicalRecord*> records;
    for (const auto& r : corpus.records) records.emplace(r.record_id, &r);

    AssembleReport report;
    std::vector<ConversationInstance> built;
    auto try_build = [&](const std::vector<std::string>& ids, auto&& make) {
        try {
            built.push_back(make());
        } catch (const IncompleteRecord&) {
            ++report.incomplete;
            report.dropped_ids.insert(report.dropped_ids.end(), ids.begin(), ids.end());
        }
    };

    for (const auto& [task, sel] : selection.tasks) {
        if (is_imaging_task(task)) {
            std::map<std::string, std::vector<RadiologyStudy>> groups;
            for (const auto& id : sel.ids) {
                const auto it = studies.find(id);
                if (it == studies.end()) throw ValidationError("selection references unknown study " + id);
                const std::string key = options.interleave ? it->second->patient_id : id;
                groups[key].push_back(*it->second);
            }
            for (auto& [key, group] : groups) {
                std::vector<std::string> ids;
                for (const auto& s : group) ids.push_back(s.study_id);
                try_build(ids, [&] { return assemble_interleaved(group, templates, images); });
            }
        } else {
            std::vector<ClinicalRecord> chosen;
            for (const auto& id : sel.ids) {
                const auto it = records.find(id);
                if (it == records.end()) throw ValidationError("selection references unknown record " + id);
                chosen.push_back(*it->second);
            }
            auto parts = drop_incomplete(std::move(chosen));
            report.incomplete += parts.dropped.size();
            for (const auto& r : parts.dropped) report.dropped_ids.push_back(r.record_id);
            for (const auto& r : parts.kept) {
                try_build({r.record_id}, [&] { return assemble_single(r, templates); });
            }
        }
    }
    for (auto& inst : built) inst.token_count = count_tokens(inst, options.counter);
    auto budget = filter_by_budget(std::move(built), options.max_tokens);
    report.over_budget = budget.dropped.size();
    for (const auto& inst : budget.dropped) {
        report.dropped_ids.insert(report.dropped_ids.end(), inst.source_ids.begin(), inst.source_ids.end());
    }
    report.instances = std::move(budget.kept);
    std::sort(report.instances.begin(), report.instances.end(),
              [](const auto& a, const auto& b) { return a.instance_id < b.instance_id; });
    std::sort(report.dropped_ids.begin(), report.dropped_ids.end());
    return report;
}

json to_json(const BenchmarkSample& s) {
    return {{"sample_id", s.sample_id},
            {"task_kind", task_code(s.task_kind)},
            {"prompt", turn_to_json(s.prompt)},
            {"reference", sections_to_json(s.reference)}};
}

BenchmarkSample benchmark_from_json(const json& j) {
    StrictObject obj(j, "benchmark sample");
    BenchmarkSample s;
    s.sample_id = obj.get<std::string>("sample_id");
    s.task_kind = task_from_code(obj.get<int>("task_kind"));
    s.prompt = turn_from_json(obj.at("prompt"));
    s.reference = sections_from_json(obj.at("reference"));
    obj.finish();
    return s;
}

std::vector<BenchmarkSample> build_benchmark(const Corpus& corpus,
                                             const std::map<TaskKind, std::vector<std::string>>& test_ids,
                                             const TemplateLibrary& templates, const ImageResolver& images) {
    std::vector<BenchmarkSample> out;
    for (const auto& [task, ids] : test_ids) {
        for (const auto& id : ids) {
            if (is_imaging_task(task)) {
                const RadiologyStudy* s = corpus.find_study(id);
                if (s == nullptr) throw ValidationError("test split references unknown study " + id);
                out.push_back({id, task, build_prompt(*s, templates, images), study_outputs(*s)});
            } else {
                const ClinicalRecord* r = corpus.find_record(id);
                if (r == nullptr) throw ValidationError("test split references unknown record " + id);
                out.push_back({id, task, build_prompt(*r, templates), r->output_sections});
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
    return out;
}

}  // namespace medcorpus::conversation
