#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "medcorpus/util.hpp"

namespace medcorpus {

enum class Gender { Male, Female };
enum class CareSetting { Outpatient, Inpatient };
enum class Modality { Xray, Ct };
enum class SeriesKind { AP, LAT, NON_CON, CE };

/// The six generation tasks. Integer codes follow the benchmark numbering.
enum class TaskKind : int {
    XrayReport = 1,
    CtReport = 2,
    OutpatientRecord = 3,
    FirstCourse = 4,
    AttendingRound = 5,
    ChiefRound = 6,
};

inline constexpr std::array<TaskKind, 6> all_tasks{
    TaskKind::XrayReport,  TaskKind::CtReport,       TaskKind::OutpatientRecord,
    TaskKind::FirstCourse, TaskKind::AttendingRound, TaskKind::ChiefRound};

inline int task_code(TaskKind task) { return static_cast<int>(task); }
TaskKind task_from_code(int code);

bool is_imaging_task(TaskKind task);
bool is_inpatient_task(TaskKind task);
std::string_view task_name(TaskKind task);

std::string_view to_string(Gender g);
std::string_view to_string(CareSetting s);
std::string_view to_string(Modality m);
std::string_view to_string(SeriesKind k);
Gender gender_from_string(std::string_view s);
CareSetting setting_from_string(std::string_view s);
Modality modality_from_string(std::string_view s);
SeriesKind series_kind_from_string(std::string_view s);

TaskKind task_for_modality(Modality m);

/// Ordered section labels of a task template; imaging tasks report
/// "Examination time", "Examination modality", "Image" as inputs.
const std::vector<std::string>& task_input_labels(TaskKind task);
const std::vector<std::string>& task_output_labels(TaskKind task);

struct Section {
    std::string label;
    std::string text;

    bool operator==(const Section&) const = default;
};

using Sections = std::vector<Section>;

/// Text of the section with the given label, or nullptr.
const std::string* find_section(const Sections& sections, std::string_view label);

struct PatientCase {
    std::string patient_id;
    Gender gender = Gender::Female;
    double age_years = 0.0;
    CareSetting setting = CareSetting::Outpatient;

    bool operator==(const PatientCase&) const = default;
};

struct VolumeDims {
    std::uint32_t z = 1;
    std::uint32_t y = 1;
    std::uint32_t x = 1;

    std::size_t count() const { return std::size_t{z} * y * x; }
    bool operator==(const VolumeDims&) const = default;
};

struct ImageSeries {
    SeriesKind kind = SeriesKind::AP;
    std::string tensor_ref;
    VolumeDims dims;
    /// Reconstruction slice thickness; 0 for projection radiographs.
    double slice_thickness_mm = 0.0;

    bool operator==(const ImageSeries&) const = default;
};

struct RadiologyStudy {
    std::string study_id;
    std::string patient_id;
    Modality modality = Modality::Xray;
    std::int64_t exam_time = 0;
    std::vector<ImageSeries> series;
    std::string findings;
    std::string impression;
    std::vector<std::string> disease_labels;

    bool operator==(const RadiologyStudy&) const = default;
};

struct ClinicalRecord {
    std::string record_id;
    std::string patient_id;
    TaskKind task_kind = TaskKind::OutpatientRecord;
    Sections input_sections;
    Sections output_sections;
    std::vector<std::string> disease_labels;
    std::int64_t created_at = 0;

    bool operator==(const ClinicalRecord&) const = default;
};

struct Corpus {
    std::vector<PatientCase> patients;
    std::vector<RadiologyStudy> studies;
    std::vector<ClinicalRecord> records;

    bool operator==(const Corpus&) const = default;

    /// Sort every table by id. write_corpus relies on this order.
    void sort();

    const RadiologyStudy* find_study(std::string_view id) const;
    const ClinicalRecord* find_record(std::string_view id) const;
};

/// Text used for similarity: the record's sections in template order,
/// "label: text" joined by newlines.
std::string record_text(const ClinicalRecord& record);

json to_json(const PatientCase& p);
json to_json(const ImageSeries& s);
json to_json(const RadiologyStudy& s);
json to_json(const ClinicalRecord& r);
PatientCase patient_from_json(const json& j);
RadiologyStudy study_from_json(const json& j);
ClinicalRecord record_from_json(const json& j);

/// Every invariant violation in the corpus, each message naming the id.
/// `check_patients` enables referential checks against the patient table.
std::vector<std::string> validate_corpus(const Corpus& corpus, bool check_patients);

/// Reads records.jsonl and studies.jsonl (required) and patients.jsonl
/// (optional; enables patient_id resolution). Throws ParseError with the
/// line number for malformed JSON and ValidationError listing every
/// invariant violation.
Corpus read_corpus(const std::filesystem::path& dir);

/// Writes patients.jsonl, studies.jsonl and records.jsonl sorted by id.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

}  // namespace medcorpus
