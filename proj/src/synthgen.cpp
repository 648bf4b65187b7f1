#include "medcorpus/synthgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unordered_set>

namespace medcorpus::synth {

namespace {

// Canonical label vocabulary; entries past the named list are numbered.
constexpr std::array<const char*, 32> named_labels{
    "bronchopneumonia",
    "mycoplasma pneumonia",
    "acute bronchitis",
    "acute upper respiratory infection",
    "lobar pneumonia",
    "viral pneumonia",
    "bronchiolitis",
    "pleural effusion",
    "atelectasis",
    "asthma exacerbation",
    "acute tonsillitis",
    "bacterial pneumonia",
    "interstitial pneumonia",
    "pulmonary consolidation",
    "acute laryngitis",
    "influenza",
    "pertussis",
    "bronchiectasis",
    "pneumothorax",
    "necrotizing pneumonia",
    "adenovirus pneumonia",
    "respiratory syncytial virus infection",
    "plastic bronchitis",
    "empyema",
    "lung abscess",
    "aspiration pneumonia",
    "tracheobronchomalacia",
    "congenital lung malformation",
    "pulmonary tuberculosis",
    "fungal pneumonia",
    "allergic rhinitis",
    "sepsis",
};

constexpr std::array<const char*, 18> onsets{"b", "c", "d", "f", "g", "h", "k", "l", "m",
                                             "n", "p", "r", "s", "t", "v", "w", "z", "sh"};
constexpr std::array<const char*, 8> nuclei{"a", "e", "i", "o", "u", "ai", "ou", "ia"};
constexpr std::array<const char*, 6> symptoms{"cough", "fever", "wheezing", "shortness of breath",
                                              "runny nose", "vomiting"};

std::string label_name(int index) {
    if (index < static_cast<int>(named_labels.size())) {
        return named_labels[index];
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "condition-%03d", index + 1);
    return buf;
}

std::string make_id(const char* prefix, std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%07zu", prefix, n);
    return buf;
}

class TextSource {
public:
    explicit TextSource(Rng& rng) : rng_(rng) {}

    std::string word() {
        std::string w;
        const auto syllables = rng_.between(1, 3);
        for (std::int64_t i = 0; i < syllables; ++i) {
            w += onsets[rng_.below(onsets.size())];
            w += nuclei[rng_.below(nuclei.size())];
        }
        return w;
    }

    std::string filler(int min_words, int max_words) {
        std::string out;
        const auto n = rng_.between(min_words, max_words);
        for (std::int64_t i = 0; i < n; ++i) {
            if (i > 0) out.push_back(' ');
            out += word();
        }
        return out;
    }

    std::string number(int lo, int hi) { return std::to_string(rng_.between(lo, hi)); }

    std::string symptom() { return symptoms[rng_.below(symptoms.size())]; }

private:
    Rng& rng_;
};

class ZipfSampler {
public:
    ZipfSampler(int vocab, double exponent) {
        cumulative_.reserve(vocab);
        double total = 0.0;
        for (int k = 1; k <= vocab; ++k) {
            total += 1.0 / std::pow(static_cast<double>(k), exponent);
            cumulative_.push_back(total);
        }
        for (auto& c : cumulative_) c /= total;
    }

    int sample(Rng& rng) const {
        const double u = rng.uniform();
        const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        return static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative_.begin(),
                                                         static_cast<std::ptrdiff_t>(cumulative_.size()) - 1));
    }

    /// k distinct ranks, first-drawn first.
    std::vector<int> sample_distinct(Rng& rng, int k) const {
        std::vector<int> out;
        while (static_cast<int>(out.size()) < k) {
            const int r = sample(rng);
            if (std::find(out.begin(), out.end(), r) == out.end()) {
                out.push_back(r);
            }
        }
        return out;
    }

    int size() const { return static_cast<int>(cumulative_.size()); }

private:
    std::vector<double> cumulative_;
};

constexpr std::int64_t day_seconds = 86400;

std::int64_t random_time(Rng& rng) {
    static const std::int64_t start = epoch_from_date(2019, 1, 1);
    static const std::int64_t end = epoch_from_date(2023, 12, 31);
    return start + rng.between(0, (end - start) / 60) * 60;
}

std::string join_labels(const std::vector<std::string>& labels) {
    std::string out;
    for (const auto& l : labels) {
        if (!out.empty()) out += "; ";
        out += l;
    }
    return out;
}

Sections outpatient_inputs(TextSource& text, const std::vector<std::string>& labels) {
    return {
        {"Chief complaint", "The pediatric patient presented with " + text.symptom() + " for " +
                                text.number(1, 14) + " days, " + text.filler(6, 12)},
        {"History of present illness", "Maximum temperature of " + text.number(37, 40) + "." +
                                           text.number(0, 9) + " C, " + text.filler(14, 26)},
        {"Physical examination", "The pediatric patient is conscious and responsive, " +
                                     text.filler(10, 20) + ", findings suggest " + labels.front()},
    };
}

Sections outpatient_outputs(TextSource& text, const std::vector<std::string>& labels) {
    return {
        {"Preliminary diagnosis", join_labels(labels)},
        {"Treatment recommendation", text.filler(8, 16)},
        {"Treatment plan", text.filler(8, 16)},
    };
}

Sections inpatient_inputs(TaskKind task, TextSource& text, const PatientCase& patient,
                          const std::string& label) {
    const std::string profile = std::string(patient.gender == Gender::Male ? "Male" : "Female") + ", " +
                                std::to_string(static_cast<int>(patient.age_years)) + " years old, " +
                                text.filler(10, 18);
    if (task == TaskKind::FirstCourse) {
        return {
            {"History of present illness", "The pediatric patient had a fever " + text.number(2, 9) +
                                               " days ago, " + text.filler(16, 28)},
            {"Physical examination", "The pediatric patient is conscious and responsive, " + text.filler(10, 18)},
            {"Auxiliary examination", "Outpatient blood test: " + text.filler(8, 14) + ", imaging suggests " + label},
            {"Clinical history features", profile},
        };
    }
    return {
        {"Clinical history features", profile},
        {"Additional clinical history and signs", "The pediatric patient continues to experience " +
                                                      text.symptom() + ", peaking at " + text.number(38, 40) +
                                                      "." + text.number(0, 9) + " C, " + text.filler(12, 22)},
    };
}

Sections inpatient_outputs(TaskKind task, TextSource& text, const std::string& label) {
    const char* diagnosis = task == TaskKind::FirstCourse ? "Admission diagnosis" : "Current diagnosis";
    return {
        {"Diagnostic basis", text.filler(12, 22) + ", consistent with " + label},
        {diagnosis, label},
        {"Diagnostic and treatment plan", text.filler(12, 22)},
    };
}

/// Random character-level edits over the record's sections, weighted by length.
void apply_edits(ClinicalRecord& record, int ops, Rng& rng) {
    for (int op = 0; op < ops; ++op) {
        std::vector<Section*> sections;
        std::size_t total = 0;
        for (auto* group : {&record.input_sections, &record.output_sections}) {
            for (auto& s : *group) {
                sections.push_back(&s);
                total += utf8_length(s.text);
            }
        }
        if (total == 0) {
            return;
        }
        auto pick = rng.below(total);
        Section* target = sections.back();
        for (auto* s : sections) {
            const auto len = utf8_length(s->text);
            if (pick < len) {
                target = s;
                break;
            }
            pick -= len;
        }
        auto scalars = utf8_decode(target->text);
        const auto pos = static_cast<std::size_t>(pick);
        const char32_t replacement = U'a' + static_cast<char32_t>(rng.below(26));
        switch (rng.below(3)) {
            case 0:
                scalars[pos] = scalars[pos] == replacement ? U'#' : replacement;
                break;
            case 1:
                scalars.insert(scalars.begin() + static_cast<std::ptrdiff_t>(pos), replacement);
                break;
            default:
                scalars.erase(scalars.begin() + static_cast<std::ptrdiff_t>(pos));
                break;
        }
        target->text = utf8_encode(scalars);
    }
}

void maybe_blank_output(ClinicalRecord& record, double rate, Rng& rng) {
    if (rng.chance(rate) && !record.output_sections.empty()) {
        record.output_sections[rng.below(record.output_sections.size())].text = "  ";
    }
}

bool is_complete(const ClinicalRecord& record) {
    return std::none_of(record.output_sections.begin(), record.output_sections.end(),
                        [](const Section& s) { return is_blank(s.text); });
}

PatientCase make_patient(std::string id, CareSetting setting, Rng& rng) {
    PatientCase p;
    p.patient_id = std::move(id);
    p.gender = rng.chance(0.5) ? Gender::Male : Gender::Female;
    p.age_years = std::round(rng.uniform() * 18.0 * 100.0) / 100.0;
    p.age_years = std::min(p.age_years, 17.99);
    p.setting = setting;
    return p;
}

template <typename T>
std::vector<std::string> pick_test(std::vector<const T*> candidates, std::int64_t count, Rng& rng,
                                   std::string T::*id) {
    rng.shuffle(candidates);
    std::vector<std::string> out;
    for (std::int64_t i = 0; i < count && i < static_cast<std::int64_t>(candidates.size()); ++i) {
        out.push_back(candidates[i]->*id);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::int64_t scaled_count(std::int64_t reference, double scale) {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(reference) * scale));
}

json task_map_to_json(const std::map<TaskKind, std::int64_t>& m) {
    json out = json::object();
    for (const auto& [task, n] : m) out[std::to_string(task_code(task))] = n;
    return out;
}

std::map<TaskKind, std::int64_t> task_map_from_json(const json& j, const std::string& context) {
    if (!j.is_object()) {
        throw ValidationError(context + ": expected an object keyed by task number");
    }
    std::map<TaskKind, std::int64_t> out;
    for (const auto& [key, value] : j.items()) {
        int code = 0;
        try {
            code = std::stoi(key);
        } catch (const std::exception&) {
            throw ValidationError(context + ": bad task key '" + key + "'");
        }
        out[task_from_code(code)] = value.get<std::int64_t>();
    }
    return out;
}

}  // namespace

std::int64_t reference_volume(TaskKind task) {
    switch (task) {
        case TaskKind::XrayReport: return 67616;
        case TaskKind::CtReport: return 2321;
        case TaskKind::OutpatientRecord: return 684758;
        case TaskKind::FirstCourse: return 9180;
        case TaskKind::AttendingRound: return 9993;
        case TaskKind::ChiefRound: return 6426;
    }
    return 0;
}

std::int64_t reference_test_size(TaskKind task) {
    return is_imaging_task(task) ? 121 : 100;
}

std::int64_t GeneratorConfig::volume(TaskKind task) const {
    if (auto it = volumes.find(task); it != volumes.end()) {
        return it->second;
    }
    return scaled_count(reference_volume(task), scale);
}

std::int64_t GeneratorConfig::test_size(TaskKind task) const {
    if (auto it = test_sizes.find(task); it != test_sizes.end()) {
        return it->second;
    }
    return std::min(scaled_count(reference_test_size(task), scale), volume(task) / 2);
}

void GeneratorConfig::validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("generator config: " + m); };
    for (TaskKind t : all_tasks) {
        if (volume(t) < 0) fail("volumes must be >= 0");
        if (test_size(t) < 0 || test_size(t) > volume(t)) fail("test size must be within [0, volume]");
    }
    if (!(scale > 0.0)) fail("scale must be > 0");
    if (disease_vocab_size < 3) fail("disease_vocab_size must be >= 3");
    if (!(zipf_exponent > 0.0)) fail("zipf_exponent must be > 0");
    if (!(duplicate_rate >= 0.0 && duplicate_rate < 1.0)) fail("duplicate_rate must be in [0, 1)");
    if (duplicate_edit_ops < 0) fail("duplicate_edit_ops must be >= 0");
    for (double r : {incomplete_rate, multi_study_rate, lateral_rate, contrast_rate, thin_slice_rate}) {
        if (!(r >= 0.0 && r <= 1.0)) fail("rates must be in [0, 1]");
    }
    if (xray_height < 2 || xray_width < 2 || ct_size < 2) fail("image sizes must be >= 2");
    if (ct_min_slices < 1 || ct_max_slices < ct_min_slices) fail("bad CT slice range");
}

GeneratorConfig config_from_json(const json& j) {
    StrictObject obj(j, "synth");
    GeneratorConfig c;
    c.seed = obj.get_or<std::uint64_t>("seed", c.seed);
    c.scale = obj.get_or<double>("scale", c.scale);
    if (obj.has("volumes")) c.volumes = task_map_from_json(obj.at("volumes"), "synth.volumes");
    if (obj.has("test_sizes")) c.test_sizes = task_map_from_json(obj.at("test_sizes"), "synth.test_sizes");
    c.disease_vocab_size = obj.get_or<int>("disease_vocab_size", c.disease_vocab_size);
    c.zipf_exponent = obj.get_or<double>("zipf_exponent", c.zipf_exponent);
    c.duplicate_rate = obj.get_or<double>("duplicate_rate", c.duplicate_rate);
    c.duplicate_edit_ops = obj.get_or<int>("duplicate_edit_ops", c.duplicate_edit_ops);
    c.incomplete_rate = obj.get_or<double>("incomplete_rate", c.incomplete_rate);
    c.multi_study_rate = obj.get_or<double>("multi_study_rate", c.multi_study_rate);
    c.lateral_rate = obj.get_or<double>("lateral_rate", c.lateral_rate);
    c.contrast_rate = obj.get_or<double>("contrast_rate", c.contrast_rate);
    c.thin_slice_rate = obj.get_or<double>("thin_slice_rate", c.thin_slice_rate);
    c.xray_height = obj.get_or<std::uint32_t>("xray_height", c.xray_height);
    c.xray_width = obj.get_or<std::uint32_t>("xray_width", c.xray_width);
    c.ct_size = obj.get_or<std::uint32_t>("ct_size", c.ct_size);
    c.ct_min_slices = obj.get_or<std::uint32_t>("ct_min_slices", c.ct_min_slices);
    c.ct_max_slices = obj.get_or<std::uint32_t>("ct_max_slices", c.ct_max_slices);
    c.write_images = obj.get_or<bool>("write_images", c.write_images);
    obj.finish();
    c.validate();
    return c;
}

json to_json(const GeneratorConfig& c) {
    std::map<TaskKind, std::int64_t> volumes, tests;
    for (TaskKind t : all_tasks) {
        volumes[t] = c.volume(t);
        tests[t] = c.test_size(t);
    }
    return {{"seed", c.seed},
            {"scale", c.scale},
            {"volumes", task_map_to_json(volumes)},
            {"test_sizes", task_map_to_json(tests)},
            {"disease_vocab_size", c.disease_vocab_size},
            {"zipf_exponent", c.zipf_exponent},
            {"duplicate_rate", c.duplicate_rate},
            {"duplicate_edit_ops", c.duplicate_edit_ops},
            {"incomplete_rate", c.incomplete_rate},
            {"multi_study_rate", c.multi_study_rate},
            {"lateral_rate", c.lateral_rate},
            {"contrast_rate", c.contrast_rate},
            {"thin_slice_rate", c.thin_slice_rate},
            {"xray_height", c.xray_height},
            {"xray_width", c.xray_width},
            {"ct_size", c.ct_size},
            {"ct_min_slices", c.ct_min_slices},
            {"ct_max_slices", c.ct_max_slices},
            {"write_images", c.write_images}};
}

// ---------------------------------------------------------------------------

double exact_jaccard(std::string_view text_a, std::string_view text_b, int n) {
    if (n < 1) {
        throw ValidationError("exact_jaccard: n must be >= 1");
    }
    auto grams = [n](std::string_view text) {
        const auto scalars = utf8_decode(text);
        if (scalars.size() < static_cast<std::size_t>(n)) {
            throw TooFewShingles("text has " + std::to_string(scalars.size()) + " units, fewer than n = " +
                                 std::to_string(n));
        }
        std::unordered_set<std::u32string> out;
        for (std::size_t i = 0; i + n <= scalars.size(); ++i) {
            out.emplace(scalars.begin() + static_cast<std::ptrdiff_t>(i),
                        scalars.begin() + static_cast<std::ptrdiff_t>(i + n));
        }
        return out;
    };
    const auto a = grams(text_a);
    const auto b = grams(text_b);
    std::size_t shared = 0;
    for (const auto& g : a) {
        shared += b.count(g);
    }
    return static_cast<double>(shared) / static_cast<double>(a.size() + b.size() - shared);
}

Cohort generate_cohort(const GeneratorConfig& config) {
    config.validate();
    Cohort cohort;
    Corpus& corpus = cohort.corpus;
    const ZipfSampler zipf(config.disease_vocab_size, config.zipf_exponent);
    std::size_t patient_counter = 0;
    auto new_patient = [&](CareSetting setting, Rng& rng) -> const PatientCase& {
        corpus.patients.push_back(make_patient(make_id("P", ++patient_counter), setting, rng));
        return corpus.patients.back();
    };

    // Imaging studies.
    for (Modality modality : {Modality::Xray, Modality::Ct}) {
        const TaskKind task = task_for_modality(modality);
        Rng rng(derive_seed(config.seed, std::string("studies/") + std::string(to_string(modality))));
        TextSource text(rng);
        const std::int64_t total = config.volume(task);
        const char* prefix = modality == Modality::Xray ? "XR" : "CT";
        std::int64_t made = 0;
        while (made < total) {
            const std::string patient_id =
                new_patient(rng.chance(0.5) ? CareSetting::Outpatient : CareSetting::Inpatient, rng).patient_id;
            std::int64_t visits = 1;
            if (rng.chance(config.multi_study_rate)) {
                visits = std::min<std::int64_t>(rng.between(2, 3), total - made);
            }
            const std::string label = label_name(zipf.sample(rng));
            std::int64_t time = random_time(rng);
            for (std::int64_t v = 0; v < visits; ++v) {
                RadiologyStudy s;
                s.study_id = make_id(prefix, static_cast<std::size_t>(++made));
                s.patient_id = patient_id;
                s.modality = modality;
                s.exam_time = time;
                time += rng.between(1, 10) * day_seconds + rng.between(0, 600) * 60;
                auto add_series = [&](SeriesKind kind, VolumeDims dims, double thickness) {
                    s.series.push_back({kind,
                                        "tensors/" + s.study_id + "_" + std::string(to_string(kind)) + ".p2tn",
                                        dims, thickness});
                };
                if (modality == Modality::Xray) {
                    add_series(SeriesKind::AP, {1, config.xray_height, config.xray_width}, 0.0);
                    if (rng.chance(config.lateral_rate)) {
                        add_series(SeriesKind::LAT, {1, config.xray_height, config.xray_width}, 0.0);
                    }
                } else {
                    const auto z = static_cast<std::uint32_t>(rng.between(config.ct_min_slices, config.ct_max_slices));
                    add_series(SeriesKind::NON_CON, {z, config.ct_size, config.ct_size}, 5.0);
                    if (rng.chance(config.contrast_rate)) {
                        const auto z2 = static_cast<std::uint32_t>(
                            rng.between(config.ct_min_slices, config.ct_max_slices));
                        add_series(SeriesKind::CE, {z2, config.ct_size, config.ct_size},
                                   rng.chance(config.thin_slice_rate) ? 1.25 : 5.0);
                    }
                }
                s.findings = "Both lungs show " + text.filler(12, 24) + (v > 0 ? ", compared to the prior examination " + text.filler(3, 6) : "");
                s.impression = label + ", " + text.filler(3, 8);
                s.disease_labels = {label};
                corpus.studies.push_back(std::move(s));
            }
        }
        Rng test_rng(derive_seed(config.seed, std::string("test/") + std::string(task_name(task))));
        std::vector<const RadiologyStudy*> candidates;
        for (const auto& s : corpus.studies) {
            if (s.modality == modality) candidates.push_back(&s);
        }
        cohort.test_ids[task] = pick_test(candidates, config.test_size(task), test_rng, &RadiologyStudy::study_id);
    }

    // Outpatient records: originals, then near-copies of earlier originals.
    {
        Rng rng(derive_seed(config.seed, "records/outpatient"));
        TextSource text(rng);
        const std::int64_t total = config.volume(TaskKind::OutpatientRecord);
        const auto duplicates = static_cast<std::int64_t>(std::floor(config.duplicate_rate * static_cast<double>(total) + 0.5));
        const std::int64_t originals = total - duplicates;

        std::vector<ClinicalRecord> drafts;
        for (std::int64_t i = 0; i < originals; ++i) {
            const std::string patient_id = new_patient(CareSetting::Outpatient, rng).patient_id;
            const auto ranks = zipf.sample_distinct(rng, static_cast<int>(rng.between(1, std::min(3, zipf.size()))));
            std::vector<std::string> labels;
            for (int r : ranks) labels.push_back(label_name(r));
            ClinicalRecord r;
            r.patient_id = patient_id;
            r.task_kind = TaskKind::OutpatientRecord;
            r.input_sections = outpatient_inputs(text, labels);
            r.output_sections = outpatient_outputs(text, labels);
            r.disease_labels = labels;
            r.created_at = random_time(rng);
            maybe_blank_output(r, config.incomplete_rate, rng);
            drafts.push_back(std::move(r));
        }
        // (draft index of original, draft index of copy)
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::int64_t i = 0; i < duplicates && originals > 0; ++i) {
            const auto source = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(originals)));
            ClinicalRecord copy = drafts[source];
            copy.created_at += rng.between(1, 30 * 24) * 3600;
            apply_edits(copy, config.duplicate_edit_ops, rng);
            pairs.emplace_back(source, drafts.size());
            drafts.push_back(std::move(copy));
        }
        // Ids follow creation time so copies are not clustered at the end.
        std::vector<std::size_t> order(drafts.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return drafts[a].created_at < drafts[b].created_at; });
        for (std::size_t rank = 0; rank < order.size(); ++rank) {
            drafts[order[rank]].record_id = make_id("OP", rank + 1);
        }
        std::vector<bool> involved(drafts.size(), false);
        for (const auto& [a, b] : pairs) {
            involved[a] = involved[b] = true;
            cohort.manifest.push_back({drafts[a].record_id, drafts[b].record_id,
                                       exact_jaccard(record_text(drafts[a]), record_text(drafts[b]), 5)});
        }
        std::sort(cohort.manifest.begin(), cohort.manifest.end(), [](const auto& x, const auto& y) {
            return std::tie(x.duplicate_record_id, x.original_record_id) <
                   std::tie(y.duplicate_record_id, y.original_record_id);
        });
        std::vector<const ClinicalRecord*> candidates;
        for (std::size_t i = 0; i < drafts.size(); ++i) {
            if (!involved[i] && is_complete(drafts[i])) candidates.push_back(&drafts[i]);
        }
        Rng test_rng(derive_seed(config.seed, "test/outpatient_record"));
        cohort.test_ids[TaskKind::OutpatientRecord] =
            pick_test(candidates, config.test_size(TaskKind::OutpatientRecord), test_rng, &ClinicalRecord::record_id);
        for (auto& d : drafts) corpus.records.push_back(std::move(d));
    }

    // Inpatient records: one patient pool shared by the three record levels.
    {
        Rng rng(derive_seed(config.seed, "records/inpatient"));
        TextSource text(rng);
        std::int64_t pool = 0;
        for (TaskKind t : {TaskKind::FirstCourse, TaskKind::AttendingRound, TaskKind::ChiefRound}) {
            pool = std::max(pool, config.volume(t));
        }
        std::vector<PatientCase> pool_patients;
        std::vector<std::string> patient_labels;
        std::vector<std::int64_t> admissions;
        for (std::int64_t i = 0; i < pool; ++i) {
            pool_patients.push_back(new_patient(CareSetting::Inpatient, rng));
            patient_labels.push_back(label_name(zipf.sample(rng)));
            admissions.push_back(random_time(rng));
        }
        for (TaskKind task : {TaskKind::FirstCourse, TaskKind::AttendingRound, TaskKind::ChiefRound}) {
            const char* prefix = task == TaskKind::FirstCourse      ? "FC"
                                 : task == TaskKind::AttendingRound ? "AR"
                                                                    : "CR";
            const std::int64_t offset_days = task == TaskKind::FirstCourse ? 1 : task == TaskKind::AttendingRound ? 3 : 6;
            const std::size_t first = corpus.records.size();
            for (std::int64_t i = 0; i < config.volume(task); ++i) {
                ClinicalRecord r;
                r.record_id = make_id(prefix, static_cast<std::size_t>(i + 1));
                r.patient_id = pool_patients[i].patient_id;
                r.task_kind = task;
                r.input_sections = inpatient_inputs(task, text, pool_patients[i], patient_labels[i]);
                r.output_sections = inpatient_outputs(task, text, patient_labels[i]);
                r.disease_labels = {patient_labels[i]};
                r.created_at = admissions[i] + offset_days * day_seconds;
                maybe_blank_output(r, config.incomplete_rate, rng);
                corpus.records.push_back(std::move(r));
            }
            std::vector<const ClinicalRecord*> candidates;
            for (std::size_t i = first; i < corpus.records.size(); ++i) {
                if (is_complete(corpus.records[i])) candidates.push_back(&corpus.records[i]);
            }
            Rng test_rng(derive_seed(config.seed, std::string("test/") + std::string(task_name(task))));
            cohort.test_ids[task] = pick_test(candidates, config.test_size(task), test_rng, &ClinicalRecord::record_id);
        }
    }

    corpus.sort();
    return cohort;
}

// ---------------------------------------------------------------------------

imaging::Volume render_series(const GeneratorConfig& config, const RadiologyStudy& study,
                              const ImageSeries& series) {
    Rng rng(derive_seed(config.seed, "pixels/" + study.study_id + "/" + std::string(to_string(series.kind))));
    const std::uint64_t motif = stable_hash(study.disease_labels.empty() ? "" : study.disease_labels.front());
    const double my = 0.3 + 0.4 * static_cast<double>(motif & 0xFFFF) / 65535.0;
    const double mx = 0.25 + 0.5 * static_cast<double>((motif >> 16) & 0xFFFF) / 65535.0;
    const double radius = 0.04 + 0.06 * static_cast<double>((motif >> 32) & 0xFF) / 255.0;

    auto ellipse = [](double y, double x, double cy, double cx, double ry, double rx) {
        const double dy = (y - cy) / ry;
        const double dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    };

    const auto dims = series.dims;
    if (study.modality == Modality::Xray) {
        imaging::Volume v(dims, imaging::Unit::Raw);
        const bool lateral = series.kind == SeriesKind::LAT;
        for (std::uint32_t y = 0; y < dims.y; ++y) {
            for (std::uint32_t x = 0; x < dims.x; ++x) {
                const double fy = (y + 0.5) / dims.y;
                const double fx = (x + 0.5) / dims.x;
                double value = 900.0 + 1400.0 * fy;
                if (lateral ? ellipse(fy, fx, 0.5, 0.5, 0.32, 0.3)
                            : (ellipse(fy, fx, 0.48, 0.3, 0.3, 0.14) || ellipse(fy, fx, 0.48, 0.7, 0.3, 0.14))) {
                    value -= 650.0;
                }
                const double d2 = ((fy - my) * (fy - my) + (fx - mx) * (fx - mx)) / (radius * radius);
                value += 500.0 * std::exp(-0.5 * d2);
                value += 25.0 * rng.normal();
                v.at(0, y, x) = static_cast<float>(std::clamp(value, 0.0, 4095.0));
            }
        }
        return v;
    }

    imaging::Volume v(dims, imaging::Unit::Hu);
    const double tissue = series.kind == SeriesKind::CE ? 120.0 : 40.0;
    const double mz = 0.35 + 0.3 * static_cast<double>((motif >> 40) & 0xFF) / 255.0;
    for (std::uint32_t z = 0; z < dims.z; ++z) {
        const double fz = (z + 0.5) / dims.z;
        for (std::uint32_t y = 0; y < dims.y; ++y) {
            for (std::uint32_t x = 0; x < dims.x; ++x) {
                const double fy = (y + 0.5) / dims.y;
                const double fx = (x + 0.5) / dims.x;
                double value = -1000.0;
                if (ellipse(fy, fx, 0.5, 0.5, 0.36, 0.46)) {
                    value = tissue;
                    if (ellipse(fy, fx, 0.48, 0.3, 0.26, 0.15) || ellipse(fy, fx, 0.48, 0.7, 0.26, 0.15)) {
                        value = -850.0;
                    }
                }
                const double d2 = ((fy - my) * (fy - my) + (fx - mx) * (fx - mx) + (fz - mz) * (fz - mz)) /
                                  (radius * radius);
                value += 700.0 * std::exp(-0.5 * d2);
                value += 15.0 * rng.normal();
                v.at(z, y, x) = static_cast<float>(std::clamp(value, -1024.0, 3071.0));
            }
        }
    }
    return v;
}

json to_json(const TestSplit& split) {
    json out = json::object();
    for (const auto& [task, ids] : split) out[std::to_string(task_code(task))] = ids;
    return out;
}

TestSplit read_test_split(const std::filesystem::path& path) {
    TestSplit split;
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError(path.string(), 1, e.what());
    }
    if (!j.is_object()) {
        throw ValidationError(path.string() + ": expected an object keyed by task number");
    }
    for (const auto& [key, ids] : j.items()) {
        split[task_from_code(std::stoi(key))] = ids.get<std::vector<std::string>>();
    }
    return split;
}

DuplicateManifest read_manifest(const std::filesystem::path& path) {
    DuplicateManifest out;
    const auto lines = split_lines(read_file(path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (is_blank(lines[i])) continue;
        try {
            const json parsed = json::parse(lines[i]);
            StrictObject obj(parsed, "manifest");
            DuplicatePair p;
            p.original_record_id = obj.get<std::string>("original_record_id");
            p.duplicate_record_id = obj.get<std::string>("duplicate_record_id");
            p.true_jaccard_5gram = obj.get<double>("true_jaccard_5gram");
            obj.finish();
            out.push_back(std::move(p));
        } catch (const std::exception& e) {
            throw ParseError(path.string(), i + 1, e.what());
        }
    }
    return out;
}

void write_cohort(const Cohort& cohort, const GeneratorConfig& config, const std::filesystem::path& dir) {
    write_corpus(cohort.corpus, dir);
    write_file(dir / "test_set.json", to_json(cohort.test_ids).dump(2) + "\n");
    std::string manifest;
    for (const auto& p : cohort.manifest) {
        manifest += to_jsonl_line({{"original_record_id", p.original_record_id},
                                   {"duplicate_record_id", p.duplicate_record_id},
                                   {"true_jaccard_5gram", p.true_jaccard_5gram}});
    }
    write_file(dir / "duplicate_manifest.jsonl", manifest);
    write_file(dir / "generator_config.json", to_json(config).dump(2) + "\n");
    if (config.write_images) {
        for (const auto& study : cohort.corpus.studies) {
            for (const auto& series : study.series) {
                imaging::write_volume(dir / series.tensor_ref, render_series(config, study, series));
            }
        }
    }
}

}  // namespace medcorpus::synth
