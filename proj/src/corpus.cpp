#include "medcorpus/corpus.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace medcorpus {

namespace {

const std::vector<std::string> imaging_inputs{"Examination time", "Examination modality", "Image"};
const std::vector<std::string> imaging_outputs{"Findings", "Impression"};
const std::vector<std::string> outpatient_inputs{"Chief complaint", "History of present illness",
                                                 "Physical examination"};
const std::vector<std::string> outpatient_outputs{"Preliminary diagnosis", "Treatment recommendation",
                                                  "Treatment plan"};
const std::vector<std::string> first_course_inputs{"History of present illness", "Physical examination",
                                                   "Auxiliary examination", "Clinical history features"};
const std::vector<std::string> first_course_outputs{"Diagnostic basis", "Admission diagnosis",
                                                    "Diagnostic and treatment plan"};
const std::vector<std::string> ward_round_inputs{"Clinical history features",
                                                 "Additional clinical history and signs"};
const std::vector<std::string> ward_round_outputs{"Diagnostic basis", "Current diagnosis",
                                                  "Diagnostic and treatment plan"};

template <typename T>
void sort_by(std::vector<T>& items, std::string T::*id) {
    std::sort(items.begin(), items.end(), [id](const T& a, const T& b) { return a.*id < b.*id; });
}

json sections_to_json(const Sections& sections) {
    json out = json::array();
    for (const auto& s : sections) {
        out.push_back({{"label", s.label}, {"text", s.text}});
    }
    return out;
}

Sections sections_from_json(const json& j, const std::string& context) {
    if (!j.is_array()) {
        throw ValidationError(context + ": sections must be an array");
    }
    Sections out;
    for (const auto& item : j) {
        StrictObject obj(item, context);
        out.push_back({obj.get<std::string>("label"), obj.get<std::string>("text")});
        obj.finish();
    }
    return out;
}

std::vector<std::string> labels_of(const Sections& sections) {
    std::vector<std::string> out;
    for (const auto& s : sections) {
        out.push_back(s.label);
    }
    return out;
}

template <typename Parse>
auto read_jsonl(const std::filesystem::path& path, Parse parse) {
    std::vector<decltype(parse(json{}))> out;
    const auto lines = split_lines(read_file(path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (is_blank(lines[i])) {
            continue;
        }
        json value;
        try {
            value = json::parse(lines[i]);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string(), i + 1, e.what());
        }
        try {
            out.push_back(parse(value));
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), i + 1, e.what());
        }
    }
    return out;
}

}  // namespace

TaskKind task_from_code(int code) {
    if (code < 1 || code > 6) {
        throw ValidationError("task code out of range: " + std::to_string(code));
    }
    return static_cast<TaskKind>(code);
}

bool is_imaging_task(TaskKind task) {
    return task == TaskKind::XrayReport || task == TaskKind::CtReport;
}

bool is_inpatient_task(TaskKind task) {
    return task == TaskKind::FirstCourse || task == TaskKind::AttendingRound ||
           task == TaskKind::ChiefRound;
}

std::string_view task_name(TaskKind task) {
    switch (task) {
        case TaskKind::XrayReport: return "xray_report";
        case TaskKind::CtReport: return "ct_report";
        case TaskKind::OutpatientRecord: return "outpatient_record";
        case TaskKind::FirstCourse: return "first_course";
        case TaskKind::AttendingRound: return "attending_round";
        case TaskKind::ChiefRound: return "chief_round";
    }
    return "unknown";
}

std::string_view to_string(Gender g) { return g == Gender::Male ? "male" : "female"; }
std::string_view to_string(CareSetting s) {
    return s == CareSetting::Outpatient ? "outpatient" : "inpatient";
}
std::string_view to_string(Modality m) { return m == Modality::Xray ? "XRAY" : "CT"; }
std::string_view to_string(SeriesKind k) {
    switch (k) {
        case SeriesKind::AP: return "AP";
        case SeriesKind::LAT: return "LAT";
        case SeriesKind::NON_CON: return "NON_CON";
        case SeriesKind::CE: return "CE";
    }
    return "?";
}

Gender gender_from_string(std::string_view s) {
    if (s == "male") return Gender::Male;
    if (s == "female") return Gender::Female;
    throw ValidationError("unknown gender: " + std::string(s));
}

CareSetting setting_from_string(std::string_view s) {
    if (s == "outpatient") return CareSetting::Outpatient;
    if (s == "inpatient") return CareSetting::Inpatient;
    throw ValidationError("unknown setting: " + std::string(s));
}

Modality modality_from_string(std::string_view s) {
    if (s == "XRAY") return Modality::Xray;
    if (s == "CT") return Modality::Ct;
    throw ValidationError("unknown modality: " + std::string(s));
}

SeriesKind series_kind_from_string(std::string_view s) {
    if (s == "AP") return SeriesKind::AP;
    if (s == "LAT") return SeriesKind::LAT;
    if (s == "NON_CON") return SeriesKind::NON_CON;
    if (s == "CE") return SeriesKind::CE;
    throw ValidationError("unknown series kind: " + std::string(s));
}

TaskKind task_for_modality(Modality m) {
    return m == Modality::Xray ? TaskKind::XrayReport : TaskKind::CtReport;
}

const std::vector<std::string>& task_input_labels(TaskKind task) {
    switch (task) {
        case TaskKind::XrayReport:
        case TaskKind::CtReport: return imaging_inputs;
        case TaskKind::OutpatientRecord: return outpatient_inputs;
        case TaskKind::FirstCourse: return first_course_inputs;
        case TaskKind::AttendingRound:
        case TaskKind::ChiefRound: return ward_round_inputs;
    }
    throw ValidationError("unknown task");
}

const std::vector<std::string>& task_output_labels(TaskKind task) {
    switch (task) {
        case TaskKind::XrayReport:
        case TaskKind::CtReport: return imaging_outputs;
        case TaskKind::OutpatientRecord: return outpatient_outputs;
        case TaskKind::FirstCourse: return first_course_outputs;
        case TaskKind::AttendingRound:
        case TaskKind::ChiefRound: return ward_round_outputs;
    }
    throw ValidationError("unknown task");
}

const std::string* find_section(const Sections& sections, std::string_view label) {
    for (const auto& s : sections) {
        if (s.label == label) {
            return &s.text;
        }
    }
    return nullptr;
}

void Corpus::sort() {
    sort_by(patients, &PatientCase::patient_id);
    sort_by(studies, &RadiologyStudy::study_id);
    sort_by(records, &ClinicalRecord::record_id);
}

const RadiologyStudy* Corpus::find_study(std::string_view id) const {
    for (const auto& s : studies) {
        if (s.study_id == id) return &s;
    }
    return nullptr;
}

const ClinicalRecord* Corpus::find_record(std::string_view id) const {
    for (const auto& r : records) {
        if (r.record_id == id) return &r;
    }
    return nullptr;
}

std::string record_text(const ClinicalRecord& record) {
    std::string out;
    auto append = [&out](const Sections& sections) {
        for (const auto& s : sections) {
            if (!out.empty()) {
                out.push_back('\n');
            }
            out += s.label;
            out += ": ";
            out += s.text;
        }
    };
    append(record.input_sections);
    append(record.output_sections);
    return out;
}

// ---------------------------------------------------------------------------
// JSON mapping

json to_json(const PatientCase& p) {
    return {{"patient_id", p.patient_id},
            {"gender", to_string(p.gender)},
            {"age_years", p.age_years},
            {"setting", to_string(p.setting)}};
}

json to_json(const ImageSeries& s) {
    return {{"kind", to_string(s.kind)},
            {"tensor_ref", s.tensor_ref},
            {"dims", {s.dims.z, s.dims.y, s.dims.x}},
            {"slice_thickness_mm", s.slice_thickness_mm}};
}

json to_json(const RadiologyStudy& s) {
    json series = json::array();
    for (const auto& item : s.series) {
        series.push_back(to_json(item));
    }
    return {{"study_id", s.study_id},
            {"patient_id", s.patient_id},
            {"modality", to_string(s.modality)},
            {"exam_time", format_rfc3339(s.exam_time)},
            {"series", series},
            {"findings", s.findings},
            {"impression", s.impression},
            {"disease_labels", s.disease_labels}};
}

json to_json(const ClinicalRecord& r) {
    return {{"record_id", r.record_id},
            {"patient_id", r.patient_id},
            {"task_kind", task_code(r.task_kind)},
            {"input_sections", sections_to_json(r.input_sections)},
            {"output_sections", sections_to_json(r.output_sections)},
            {"disease_labels", r.disease_labels},
            {"created_at", format_rfc3339(r.created_at)}};
}

PatientCase patient_from_json(const json& j) {
    StrictObject obj(j, "patient");
    PatientCase p;
    p.patient_id = obj.get<std::string>("patient_id");
    p.gender = gender_from_string(obj.get<std::string>("gender"));
    p.age_years = obj.get<double>("age_years");
    p.setting = setting_from_string(obj.get<std::string>("setting"));
    obj.finish();
    return p;
}

RadiologyStudy study_from_json(const json& j) {
    StrictObject obj(j, "study");
    RadiologyStudy s;
    s.study_id = obj.get<std::string>("study_id");
    s.patient_id = obj.get<std::string>("patient_id");
    s.modality = modality_from_string(obj.get<std::string>("modality"));
    s.exam_time = parse_rfc3339(obj.get<std::string>("exam_time"));
    const json& series = obj.at("series");
    if (!series.is_array()) {
        throw ValidationError("study " + s.study_id + ": series must be an array");
    }
    for (const auto& item : series) {
        StrictObject so(item, "study " + s.study_id + " series");
        ImageSeries is;
        is.kind = series_kind_from_string(so.get<std::string>("kind"));
        is.tensor_ref = so.get<std::string>("tensor_ref");
        const auto dims = so.get<std::vector<std::uint32_t>>("dims");
        if (dims.size() != 3) {
            throw ValidationError("study " + s.study_id + ": dims must have 3 entries");
        }
        is.dims = {dims[0], dims[1], dims[2]};
        is.slice_thickness_mm = so.get<double>("slice_thickness_mm");
        so.finish();
        s.series.push_back(std::move(is));
    }
    s.findings = obj.get<std::string>("findings");
    s.impression = obj.get<std::string>("impression");
    s.disease_labels = obj.get<std::vector<std::string>>("disease_labels");
    obj.finish();
    return s;
}

ClinicalRecord record_from_json(const json& j) {
    StrictObject obj(j, "record");
    ClinicalRecord r;
    r.record_id = obj.get<std::string>("record_id");
    r.patient_id = obj.get<std::string>("patient_id");
    r.task_kind = task_from_code(obj.get<int>("task_kind"));
    r.input_sections = sections_from_json(obj.at("input_sections"), "record " + r.record_id);
    r.output_sections = sections_from_json(obj.at("output_sections"), "record " + r.record_id);
    r.disease_labels = obj.get<std::vector<std::string>>("disease_labels");
    r.created_at = parse_rfc3339(obj.get<std::string>("created_at"));
    obj.finish();
    return r;
}

// ---------------------------------------------------------------------------
// Validation

std::vector<std::string> validate_corpus(const Corpus& corpus, bool check_patients) {
    std::vector<std::string> errors;
    std::set<std::string> patient_ids;
    for (const auto& p : corpus.patients) {
        if (!patient_ids.insert(p.patient_id).second) {
            errors.push_back("patient " + p.patient_id + ": duplicate patient_id");
        }
        if (!(p.age_years >= 0.0)) {
            errors.push_back("patient " + p.patient_id + ": age_years must be non-negative");
        }
    }
    auto check_patient = [&](const std::string& owner, const std::string& pid) {
        if (check_patients && !patient_ids.contains(pid)) {
            errors.push_back(owner + ": dangling patient_id " + pid);
        }
    };

    std::set<std::string> study_ids;
    for (const auto& s : corpus.studies) {
        const std::string owner = "study " + s.study_id;
        if (!study_ids.insert(s.study_id).second) {
            errors.push_back(owner + ": duplicate study_id");
        }
        check_patient(owner, s.patient_id);
        if (is_blank(s.findings)) errors.push_back(owner + ": empty findings");
        if (is_blank(s.impression)) errors.push_back(owner + ": empty impression");

        std::multiset<SeriesKind> kinds;
        for (const auto& series : s.series) {
            kinds.insert(series.kind);
            if (series.dims.z == 0 || series.dims.y == 0 || series.dims.x == 0) {
                errors.push_back(owner + ": non-positive series dims");
            }
            const bool xray_kind = series.kind == SeriesKind::AP || series.kind == SeriesKind::LAT;
            if (xray_kind != (s.modality == Modality::Xray)) {
                errors.push_back(owner + ": series kind " + std::string(to_string(series.kind)) +
                                 " inconsistent with modality " + std::string(to_string(s.modality)));
            }
            if (s.modality == Modality::Xray && series.dims.z != 1) {
                errors.push_back(owner + ": X-ray view must have z = 1");
            }
        }
        const std::multiset<SeriesKind> xray1{SeriesKind::AP};
        const std::multiset<SeriesKind> xray2{SeriesKind::AP, SeriesKind::LAT};
        const std::multiset<SeriesKind> ct1{SeriesKind::NON_CON};
        const std::multiset<SeriesKind> ct2{SeriesKind::NON_CON, SeriesKind::CE};
        const bool layout_ok = s.modality == Modality::Xray ? (kinds == xray1 || kinds == xray2)
                                                            : (kinds == ct1 || kinds == ct2);
        if (!layout_ok) {
            errors.push_back(owner + ": series layout must be " +
                             (s.modality == Modality::Xray ? "AP or AP+LAT" : "NON_CON or NON_CON+CE"));
        }
    }

    std::set<std::string> record_ids;
    for (const auto& r : corpus.records) {
        const std::string owner = "record " + r.record_id;
        if (!record_ids.insert(r.record_id).second) {
            errors.push_back(owner + ": duplicate record_id");
        }
        check_patient(owner, r.patient_id);
        if (is_imaging_task(r.task_kind)) {
            errors.push_back(owner + ": imaging tasks are stored as studies, not records");
            continue;
        }
        if (labels_of(r.input_sections) != task_input_labels(r.task_kind)) {
            errors.push_back(owner + ": input section labels do not match the task " +
                             std::to_string(task_code(r.task_kind)) + " template");
        }
        if (labels_of(r.output_sections) != task_output_labels(r.task_kind)) {
            errors.push_back(owner + ": output section labels do not match the task " +
                             std::to_string(task_code(r.task_kind)) + " template");
        }
    }
    return errors;
}

Corpus read_corpus(const std::filesystem::path& dir) {
    Corpus corpus;
    const auto records_path = dir / "records.jsonl";
    const auto studies_path = dir / "studies.jsonl";
    const auto patients_path = dir / "patients.jsonl";
    if (!std::filesystem::exists(records_path) || !std::filesystem::exists(studies_path)) {
        throw IoError(dir.string() + ": records.jsonl and studies.jsonl are required");
    }
    corpus.records = read_jsonl(records_path, record_from_json);
    corpus.studies = read_jsonl(studies_path, study_from_json);
    const bool has_patients = std::filesystem::exists(patients_path);
    if (has_patients) {
        corpus.patients = read_jsonl(patients_path, patient_from_json);
    }
    const auto errors = validate_corpus(corpus, has_patients);
    if (!errors.empty()) {
        std::string message = dir.string() + ": " + std::to_string(errors.size()) + " invariant violation(s)";
        for (const auto& e : errors) {
            message += "\n  " + e;
        }
        throw ValidationError(message);
    }
    corpus.sort();
    return corpus;
}

void write_corpus(const Corpus& input, const std::filesystem::path& dir) {
    Corpus corpus = input;
    corpus.sort();
    std::string patients, studies, records;
    for (const auto& p : corpus.patients) patients += to_jsonl_line(to_json(p));
    for (const auto& s : corpus.studies) studies += to_jsonl_line(to_json(s));
    for (const auto& r : corpus.records) records += to_jsonl_line(to_json(r));
    // Without a patient table the reader skips referential checks.
    if (!corpus.patients.empty()) {
        write_file(dir / "patients.jsonl", patients);
    }
    write_file(dir / "studies.jsonl", studies);
    write_file(dir / "records.jsonl", records);
}

}  // namespace medcorpus
