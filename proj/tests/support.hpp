#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>

#include "medcorpus/corpus.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("medcorpus-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline medcorpus::ClinicalRecord outpatient_record(const std::string& id, std::vector<std::string> labels = {"asthma"},
                                                   std::int64_t created_at = 1'600'000'000) {
    using namespace medcorpus;
    ClinicalRecord r;
    r.record_id = id;
    r.patient_id = "P-" + id;
    r.task_kind = TaskKind::OutpatientRecord;
    for (const auto& label : task_input_labels(r.task_kind)) {
        r.input_sections.push_back({label, label + " of " + id});
    }
    for (const auto& label : task_output_labels(r.task_kind)) {
        r.output_sections.push_back({label, "answer " + label + " for " + id});
    }
    r.disease_labels = std::move(labels);
    r.created_at = created_at;
    return r;
}

inline medcorpus::ClinicalRecord inpatient_record(const std::string& id, medcorpus::TaskKind task,
                                                  std::vector<std::string> labels = {"pneumonia"}) {
    auto r = outpatient_record(id, std::move(labels));
    r.task_kind = task;
    r.input_sections.clear();
    r.output_sections.clear();
    for (const auto& label : medcorpus::task_input_labels(task)) {
        r.input_sections.push_back({label, label + " of " + id});
    }
    for (const auto& label : medcorpus::task_output_labels(task)) {
        r.output_sections.push_back({label, "answer " + label + " for " + id});
    }
    return r;
}

inline medcorpus::RadiologyStudy xray_study(const std::string& id, const std::string& patient, std::int64_t time,
                                            bool lateral) {
    using namespace medcorpus;
    RadiologyStudy s;
    s.study_id = id;
    s.patient_id = patient;
    s.modality = Modality::Xray;
    s.exam_time = time;
    s.series.push_back({SeriesKind::AP, "tensors/" + id + "_AP.p2tn", {1, 16, 16}, 0.0});
    if (lateral) {
        s.series.push_back({SeriesKind::LAT, "tensors/" + id + "_LAT.p2tn", {1, 16, 16}, 0.0});
    }
    s.findings = "Findings of " + id;
    s.impression = "Impression of " + id;
    s.disease_labels = {"bronchitis"};
    return s;
}

inline medcorpus::RadiologyStudy ct_study(const std::string& id, const std::string& patient, std::int64_t time,
                                          bool contrast) {
    using namespace medcorpus;
    RadiologyStudy s;
    s.study_id = id;
    s.patient_id = patient;
    s.modality = Modality::Ct;
    s.exam_time = time;
    s.series.push_back({SeriesKind::NON_CON, "tensors/" + id + "_NON_CON.p2tn", {4, 8, 8}, 5.0});
    if (contrast) {
        s.series.push_back({SeriesKind::CE, "tensors/" + id + "_CE.p2tn", {3, 8, 8}, 5.0});
    }
    s.findings = "Findings of " + id;
    s.impression = "Impression of " + id;
    s.disease_labels = {"pneumonia"};
    return s;
}

}  // namespace testing_support
