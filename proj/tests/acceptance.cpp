// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <unistd.h>

#include <Eigen/Dense>

#include "dense_oracle.hpp"
#include "medcorpus/pipeline.hpp"
#include "medcorpus/perceiver.hpp"

using namespace medcorpus;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

/// Collects named checks for one criterion and prints the verdict line.
class Criterion {
public:
    Criterion(int number, std::string title) : number_(number), title_(std::move(title)) {}

    void check(bool ok, const std::string& what) {
        if (!ok) failures_.push_back(what);
    }
    void note(const std::string& text) { notes_.push_back(text); }

    bool report() const {
        const bool ok = failures_.empty();
        std::cout << (ok ? "PASS" : "FAIL") << " criterion " << number_ << " " << title_;
        if (!notes_.empty()) {
            std::cout << " [";
            for (std::size_t i = 0; i < notes_.size(); ++i) std::cout << (i ? "; " : "") << notes_[i];
            std::cout << "]";
        }
        std::cout << "\n";
        for (const auto& f : failures_) std::cout << "    failed: " << f << "\n";
        std::cout.flush();
        return ok;
    }

private:
    int number_;
    std::string title_;
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

fs::path scratch_dir(const std::string& tag) {
    static int counter = 0;
    auto p = fs::temp_directory_path() /
             ("medcorpus_accept_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

template <typename F>
bool guarded(Criterion& c, F&& body) {
    try {
        body();
    } catch (const std::exception& e) {
        c.check(false, std::string("exception: ") + e.what());
    }
    return c.report();
}

std::map<TaskKind, std::int64_t> zero_volumes() {
    std::map<TaskKind, std::int64_t> m;
    for (TaskKind t : all_tasks) m[t] = 0;
    return m;
}

std::size_t intersection_size(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) ++i;
        else if (b[j] < a[i]) ++j;
        else { ++n; ++i; ++j; }
    }
    return n;
}

// ---------------------------------------------------------------------------

bool criterion_dedup_oracle() {
    Criterion c(1, "dedup oracle equivalence");
    return guarded(c, [&] {
        synth::GeneratorConfig cfg;
        cfg.seed = 4242;
        cfg.volumes = zero_volumes();
        cfg.volumes[TaskKind::OutpatientRecord] = 450;
        cfg.test_sizes = zero_volumes();
        cfg.duplicate_rate = 0.45;
        cfg.write_images = false;
        const auto cohort = synth::generate_cohort(cfg);
        const auto& records = cohort.corpus.records;
        c.check(records.size() <= 500, "corpus has at most 500 outpatient records");

        const auto start = Clock::now();
        const auto items = dedup::items_from_records(records);
        const dedup::LshParams params;
        const auto report = dedup::dedup_corpus(items, params);
        const double dedup_seconds = seconds_since(start);

        std::map<std::string, std::size_t> group_of;
        for (std::size_t g = 0; g < report.groups.size(); ++g)
            for (const auto& id : report.groups[g]) group_of[id] = g;

        // Exact all-pairs oracle.
        std::vector<dedup::ShingleSet> sets;
        for (const auto& item : items) {
            auto s = dedup::shingle(item.text, params.ngram);
            std::sort(s.shingles.begin(), s.shingles.end());
            s.shingles.erase(std::unique(s.shingles.begin(), s.shingles.end()), s.shingles.end());
            sets.push_back(std::move(s));
        }
        std::size_t similar = 0, grouped = 0;
        for (std::size_t i = 0; i < items.size(); ++i) {
            for (std::size_t j = i + 1; j < items.size(); ++j) {
                const std::size_t inter = intersection_size(sets[i].shingles, sets[j].shingles);
                const std::size_t uni = sets[i].shingles.size() + sets[j].shingles.size() - inter;
                if (uni == 0 || static_cast<double>(inter) / static_cast<double>(uni) < params.threshold) continue;
                ++similar;
                const auto gi = group_of.find(items[i].id), gj = group_of.find(items[j].id);
                if (gi != group_of.end() && gj != group_of.end() && gi->second == gj->second) ++grouped;
            }
        }
        std::size_t injected = 0;
        for (const auto& pair : cohort.manifest)
            if (pair.true_jaccard_5gram >= params.threshold) ++injected;
        const double recall = similar ? static_cast<double>(grouped) / static_cast<double>(similar) : 0.0;

        // No retained pair may look like a duplicate to the estimator.
        std::vector<dedup::TextItem> kept;
        const std::set<std::string> kept_ids(report.kept_ids.begin(), report.kept_ids.end());
        for (const auto& item : items)
            if (kept_ids.contains(item.id)) kept.push_back(item);
        const auto sigs = dedup::compute_signatures(kept, params);
        std::size_t retained_violations = 0;
        for (std::size_t i = 0; i < sigs.size(); ++i)
            for (std::size_t j = i + 1; j < sigs.size(); ++j)
                if (dedup::estimate_jaccard(sigs[i], sigs[j]) >= params.threshold) ++retained_violations;

        c.note("records=" + std::to_string(records.size()) + " injected>=0.85=" + std::to_string(injected) +
               " oracle_pairs=" + std::to_string(similar) + " recall=" + fmt(recall) +
               " retained_violations=" + std::to_string(retained_violations) + " dedup_s=" + fmt(dedup_seconds, 3));
        c.check(injected >= 200, "at least 200 injected duplicate pairs");
        c.check(recall >= 0.99, "recall >= 0.99");
        c.check(retained_violations == 0, "no retained pair with estimated Jaccard >= 0.85");
        c.check(dedup_seconds < 30.0, "dedup runtime < 30 s");
    });
}

bool criterion_minhash_accuracy() {
    Criterion c(2, "MinHash estimator accuracy");
    return guarded(c, [&] {
        const dedup::LshParams params;
        const dedup::MinHasher hasher(params);
        std::size_t pairs = 0, within = 0;
        double worst_sigmas = 0.0;
        for (std::uint64_t seed = 1; seed <= 6; ++seed) {
            for (int tenth = 1; tenth <= 9; ++tenth) {
                const std::size_t uni = 1000, inter = static_cast<std::size_t>(tenth) * 100;
                const std::size_t only = (uni - inter) / 2;
                Rng rng(seed * 1000 + static_cast<std::uint64_t>(tenth));
                std::set<std::uint64_t> pool;
                while (pool.size() < uni) pool.insert(rng.next_u64());
                std::vector<std::uint64_t> all(pool.begin(), pool.end());
                rng.shuffle(all);
                dedup::ShingleSet a, b;
                for (std::size_t k = 0; k < uni; ++k) {
                    if (k < inter) {
                        a.shingles.push_back(all[k]);
                        b.shingles.push_back(all[k]);
                    } else if (k < inter + only) {
                        a.shingles.push_back(all[k]);
                    } else {
                        b.shingles.push_back(all[k]);
                    }
                }
                std::sort(a.shingles.begin(), a.shingles.end());
                std::sort(b.shingles.begin(), b.shingles.end());
                const double j = static_cast<double>(inter) / static_cast<double>(uni);
                const double estimate = dedup::estimate_jaccard(hasher.signature(a), hasher.signature(b));
                const double sigma = std::sqrt(j * (1.0 - j) / params.num_perm);
                const double dev = std::abs(estimate - j);
                worst_sigmas = std::max(worst_sigmas, dev / sigma);
                ++pairs;
                if (dev <= 6.0 * sigma) ++within;
            }
        }
        const double share = static_cast<double>(within) / static_cast<double>(pairs);
        c.note("pairs=" + std::to_string(pairs) + " within_6sigma=" + fmt(share) + " worst=" + fmt(worst_sigmas, 3) +
               " sigma");
        c.check(pairs >= 50, "at least 50 constructed pairs");
        c.check(share >= 0.99, ">= 99% of estimates within 6 sigma");
    });
}

bool criterion_banding() {
    Criterion c(3, "banding arithmetic");
    return guarded(c, [&] {
        const dedup::LshParams params;
        c.check(params.bands == 256 && params.rows == 16, "defaults are 256 bands x 16 rows");
        const auto sig = dedup::minhash(dedup::shingle("a reasonably long piece of clinical text"), params);
        c.check(sig.values.size() == 4096, "signature has 4096 components");
        c.check(dedup::band_keys(sig, params).size() == 256, "one key per band");
        const auto shipped = pipeline::load_config(fs::path(MEDCORPUS_SOURCE_DIR) / "configs/default.json");
        c.check(shipped.dedup.bands * shipped.dedup.rows == shipped.dedup.num_perm && shipped.dedup.num_perm == 4096,
                "shipped config uses 4096 components");

        std::size_t rejected = 0, cases = 0;
        for (auto [bands, rows, perm] : {std::tuple{255, 16, 4096}, {256, 15, 4096}, {256, 16, 4095}, {128, 16, 4096}}) {
            ++cases;
            dedup::LshParams bad;
            bad.bands = bands;
            bad.rows = rows;
            bad.num_perm = perm;
            try {
                bad.validate();
            } catch (const ValidationError&) {
                ++rejected;
            }
        }
        json cfg = json::parse(read_file(fs::path(MEDCORPUS_SOURCE_DIR) / "configs/default.json"));
        cfg["dedup"]["bands"] = 200;
        ++cases;
        try {
            (void)pipeline::config_from_json(cfg);
        } catch (const ValidationError&) {
            ++rejected;
        }
        c.note("rejected " + std::to_string(rejected) + "/" + std::to_string(cases) + " inconsistent configs");
        c.check(rejected == cases, "every bands*rows != |signature| config is rejected");
    });
}

std::map<std::string, std::int64_t> category_sizes(const std::vector<sampling::PoolItem>& pool) {
    std::map<std::string, std::int64_t> sizes;
    for (const auto& item : pool) {
        if (item.labels.empty()) ++sizes[sampling::unlabeled];
        for (const auto& l : item.labels) ++sizes[l];
    }
    return sizes;
}

/// Window and cap violations of one task selection, counted from the pool.
std::size_t rule_violations(const sampling::TaskSelection& sel, const std::vector<sampling::PoolItem>& pool,
                            std::int64_t lo, std::int64_t hi, std::optional<std::int64_t> cap) {
    const auto sizes = category_sizes(pool);
    std::map<std::string, const sampling::PoolItem*> by_id;
    for (const auto& item : pool) by_id[item.id] = &item;
    auto in_window = [&](const std::string& label) {
        const auto it = sizes.find(label);
        return it != sizes.end() && it->second >= lo && it->second <= hi;
    };
    std::size_t violations = 0;
    for (const auto& label : sel.included_categories)
        if (!in_window(label)) ++violations;
    std::map<std::string, std::int64_t> counts;
    for (const auto& id : sel.ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) {
            ++violations;
            continue;
        }
        bool any = false;
        for (const auto& l : it->second->labels) {
            if (in_window(l)) {
                any = true;
                ++counts[l];
            }
        }
        if (!any) ++violations;
    }
    if (cap)
        for (const auto& [label, n] : counts)
            if (n > *cap) ++violations;
    return violations;
}

bool criterion_sampling() {
    Criterion c(4, "sampling discipline");
    return guarded(c, [&] {
        synth::GeneratorConfig cfg;
        cfg.seed = 777;
        cfg.volumes = zero_volumes();
        cfg.volumes[TaskKind::XrayReport] = 20000;
        cfg.volumes[TaskKind::OutpatientRecord] = 20000;
        cfg.volumes[TaskKind::FirstCourse] = 1500;
        cfg.volumes[TaskKind::AttendingRound] = 1500;
        cfg.volumes[TaskKind::ChiefRound] = 1500;
        cfg.test_sizes = zero_volumes();
        cfg.duplicate_rate = 0.0;
        cfg.incomplete_rate = 0.0;
        cfg.write_images = false;
        const auto cohort = synth::generate_cohort(cfg);
        const auto pools = sampling::build_pools(cohort.corpus, cohort.test_ids, std::nullopt);

        const auto plan2 = sampling::StagePlan::defaults(2, 7);
        const auto plan3 = sampling::StagePlan::defaults(3, 7);
        const auto s2 = sampling::run_plan(pools, plan2);
        const auto s3 = sampling::run_plan(pools, plan3);

        std::size_t violations = 0;
        violations += rule_violations(s2.tasks.at(TaskKind::OutpatientRecord), pools.at(TaskKind::OutpatientRecord),
                                      325, 5000, 500);
        violations += rule_violations(s3.tasks.at(TaskKind::XrayReport), pools.at(TaskKind::XrayReport), 100, 2000, 500);
        violations += rule_violations(s3.tasks.at(TaskKind::OutpatientRecord), pools.at(TaskKind::OutpatientRecord),
                                      325, 5000, 200);
        for (TaskKind t : {TaskKind::FirstCourse, TaskKind::AttendingRound, TaskKind::ChiefRound}) {
            const auto& sel = s3.tasks.at(t);
            const auto& pool = pools.at(t);
            violations += rule_violations(sel, pool, 40, 500, std::nullopt);
            // "All in window": every pool record carrying an in-window label is selected.
            const auto sizes = category_sizes(pool);
            const std::set<std::string> chosen(sel.ids.begin(), sel.ids.end());
            for (const auto& item : pool) {
                const bool eligible = std::any_of(item.labels.begin(), item.labels.end(), [&](const std::string& l) {
                    return sizes.at(l) >= 40 && sizes.at(l) <= 500;
                });
                if (eligible != chosen.contains(item.id)) ++violations;
            }
        }
        c.check(violations == 0, "zero window/cap violations");

        const auto d2 = sampling::distribution_report(s2);
        const auto d3 = sampling::distribution_report(s3);
        std::string ratios;
        for (const auto& [task, b3] : d3.balance) {
            const auto it = d2.balance.find(task);
            if (it == d2.balance.end()) continue;
            ratios += (ratios.empty() ? "" : ",") + std::to_string(task_code(task)) + ":" + fmt(b3.ratio, 3) + "<=" +
                      fmt(it->second.ratio, 3);
            c.check(b3.ratio <= it->second.ratio, "stage-3 ratio <= stage-2 ratio for task " +
                                                      std::to_string(task_code(task)));
        }

        std::int64_t inpatient_total = 0;
        for (TaskKind t : {TaskKind::FirstCourse, TaskKind::AttendingRound, TaskKind::ChiefRound})
            inpatient_total += static_cast<std::int64_t>(s2.tasks.at(t).ids.size());
        const auto& out2 = s2.tasks.at(TaskKind::OutpatientRecord);
        const auto outpatient_total = static_cast<std::int64_t>(out2.ids.size());
        std::int64_t last_pass = 0;
        for (const auto& p : s2.audit)
            if (p.task == TaskKind::OutpatientRecord) last_pass = p.drawn;
        const auto pass_width = static_cast<std::int64_t>(out2.included_categories.size());
        c.check(outpatient_total >= inpatient_total, "stage-2 outpatient total reaches the inpatient total");
        c.check(outpatient_total - inpatient_total < std::max<std::int64_t>(last_pass, 1) &&
                    last_pass <= pass_width,
                "stage-2 outpatient total within one round-robin pass of the inpatient total");
        c.note("violations=" + std::to_string(violations) + " ratios(s3<=s2)=" + ratios +
               " outpatient=" + std::to_string(outpatient_total) + " inpatient=" + std::to_string(inpatient_total) +
               " pass=" + std::to_string(pass_width));
    });
}

bool criterion_preprocessing() {
    Criterion c(5, "preprocessing exactness");
    return guarded(c, [&] {
        using namespace imaging;
        Volume hu({1, 1, 4}, Unit::Hu);
        hu.values = {-1100.0f, -500.0f, 100.0f, 400.0f};
        const auto w = hu_window(hu);
        c.check(w.values == std::vector<float>{0.0f, 0.5f, 1.0f, 1.0f}, "HU window edge values exact");

        bool constants = true;
        for (float v : {0.0f, 0.25f, 1.0f, -3.5f, 1234.5f}) {
            const auto r = resize_xy(Volume({2, 19, 31}, Unit::Normalized, v), 336);
            constants = constants && std::all_of(r.values.begin(), r.values.end(), [&](float x) { return x == v; });
        }
        c.check(constants, "resize preserves constants exactly");

        const std::uint32_t n = 64, target = 336;
        Volume ramp({1, n, n}, Unit::Normalized);
        for (std::uint32_t y = 0; y < n; ++y)
            for (std::uint32_t x = 0; x < n; ++x)
                ramp.at(0, y, x) = static_cast<float>(0.6 * x / (n - 1.0) + 0.3 * y / (n - 1.0));
        const auto r = resize_xy(ramp, target);
        double worst = 0.0;
        for (std::uint32_t y = 0; y < target; ++y)
            for (std::uint32_t x = 0; x < target; ++x)
                worst = std::max(worst, std::abs(r.at(0, y, x) - (0.6 * x / (target - 1.0) + 0.3 * y / (target - 1.0))));
        c.check(worst <= 1e-6, "resize reproduces linear ramps to 1e-6");

        Volume a({3, 8, 8}, Unit::Normalized), b({5, 8, 8}, Unit::Normalized);
        Rng rng(5);
        for (float& v : a.values) v = static_cast<float>(rng.uniform());
        for (float& v : b.values) v = static_cast<float>(rng.uniform());
        const auto [pa, pb] = pad_z(a, b);
        bool bits = pa.dims.z == 5 && pb.dims.z == 5 &&
                    std::memcmp(pa.values.data(), a.values.data(), a.values.size() * sizeof(float)) == 0 &&
                    std::memcmp(pb.values.data(), b.values.data(), b.values.size() * sizeof(float)) == 0;
        for (std::size_t i = a.values.size(); i < pa.values.size(); ++i) bits = bits && pa.values[i] == 0.0f;
        c.check(bits, "pad_z keeps existing voxels bit-identical and zero-fills the tail");
        c.note("ramp_err=" + fmt(worst, 3));
    });
}

bool alternates(const conversation::ConversationInstance& inst) {
    if (inst.turns.empty() || inst.turns.size() % 2 != 0) return false;
    std::vector<std::size_t> assistant;
    for (std::size_t i = 0; i < inst.turns.size(); ++i) {
        const auto expected = i % 2 == 0 ? conversation::Speaker::Human : conversation::Speaker::Assistant;
        if (inst.turns[i].speaker != expected) return false;
        if (expected == conversation::Speaker::Assistant) assistant.push_back(i);
    }
    return inst.loss_turns == assistant;
}

std::size_t image_segments(const conversation::Turn& turn) {
    return static_cast<std::size_t>(std::count_if(turn.segments.begin(), turn.segments.end(), [](const auto& s) {
        return s.kind == conversation::SegmentKind::Image;
    }));
}

bool criterion_conversation() {
    Criterion c(6, "conversation format");
    return guarded(c, [&] {
        synth::GeneratorConfig cfg;
        cfg.seed = 99;
        cfg.volumes = {{TaskKind::XrayReport, 300}, {TaskKind::CtReport, 120}, {TaskKind::OutpatientRecord, 300},
                       {TaskKind::FirstCourse, 60}, {TaskKind::AttendingRound, 60}, {TaskKind::ChiefRound, 60}};
        cfg.test_sizes = zero_volumes();
        cfg.multi_study_rate = 0.5;
        cfg.write_images = false;
        const auto cohort = synth::generate_cohort(cfg);
        const auto templates = conversation::TemplateLibrary::builtin();
        const auto pools = sampling::build_pools(cohort.corpus, cohort.test_ids, std::nullopt);

        std::size_t instances = 0, exact = 0, alternating = 0, interleaved = 0, sorted = 0;
        for (int stage = 1; stage <= 3; ++stage) {
            const auto selection = sampling::run_plan(pools, sampling::StagePlan::defaults(stage, 3));
            const auto report = conversation::assemble_selection(cohort.corpus, selection, templates, {});
            for (const auto& inst : report.instances) {
                ++instances;
                if (conversation::loss_mask_is_exact(inst)) ++exact;
                if (alternates(inst)) ++alternating;
                if (is_imaging_task(inst.task_kind) && inst.source_ids.size() > 1) {
                    ++interleaved;
                    bool ok = true;
                    const RadiologyStudy* prev = nullptr;
                    for (const auto& id : inst.source_ids) {
                        const auto* s = cohort.corpus.find_study(id);
                        if (!s) ok = false;
                        else if (prev && std::pair(s->exam_time, s->study_id) < std::pair(prev->exam_time, prev->study_id))
                            ok = false;
                        prev = s;
                    }
                    if (ok) ++sorted;
                }
            }
        }
        c.check(instances > 0 && exact == instances, "every instance has an exact loss mask");
        c.check(alternating == instances, "every instance alternates Human/Assistant with loss on assistant turns");
        c.check(interleaved > 0, "interleaved instances are produced");
        c.check(sorted == interleaved, "interleaved instances are chronological");

        // Budget boundary on a record padded to exactly 4000 tokens.
        const conversation::TokenCounter counter;
        ClinicalRecord rec = *std::find_if(cohort.corpus.records.begin(), cohort.corpus.records.end(), [](const auto& r) {
            return r.task_kind == TaskKind::OutpatientRecord;
        });
        const auto base = conversation::count_tokens(conversation::assemble_single(rec, templates), counter);
        rec.input_sections.front().text += std::string(static_cast<std::size_t>(4000 - base), 'a');
        auto at_limit = conversation::assemble_single(rec, templates);
        at_limit.token_count = conversation::count_tokens(at_limit, counter);
        rec.input_sections.front().text += "a";
        auto over = conversation::assemble_single(rec, templates);
        over.token_count = conversation::count_tokens(over, counter);
        const auto part = conversation::filter_by_budget({at_limit, over}, 4000);
        c.check(at_limit.token_count == 4000 && over.token_count == 4001, "padded records count 4000 and 4001 tokens");
        c.check(part.kept.size() == 1 && part.kept.front().token_count == 4000, "4000-token instance kept");
        c.check(part.dropped.size() == 1 && part.dropped.front().token_count == 4001, "4001-token instance dropped");

        std::size_t ap_only = 0, ap_lat = 0, ct_pair = 0, wrong = 0;
        for (const auto& s : cohort.corpus.studies) {
            std::set<SeriesKind> kinds;
            for (const auto& series : s.series) kinds.insert(series.kind);
            const auto images = image_segments(conversation::build_prompt(s, templates));
            if (s.modality == Modality::Xray) {
                const std::size_t expected = kinds.contains(SeriesKind::LAT) ? 2 : 1;
                (expected == 2 ? ap_lat : ap_only)++;
                if (images != expected) ++wrong;
            } else if (kinds.contains(SeriesKind::NON_CON) && kinds.contains(SeriesKind::CE)) {
                ++ct_pair;
                if (images != 2) ++wrong;
            }
        }
        c.check(ap_lat > 0 && ap_only > 0 && ct_pair > 0, "cohort has AP, AP+LAT and NON_CON+CE studies");
        c.check(wrong == 0, "image placeholder counts match the series");
        c.note("instances=" + std::to_string(instances) + " interleaved=" + std::to_string(interleaved) +
               " ap=" + std::to_string(ap_only) + " ap+lat=" + std::to_string(ap_lat) +
               " ct_pair=" + std::to_string(ct_pair));
    });
}

bool criterion_perceiver_shapes() {
    Criterion c(7, "perceiver shape invariance");
    return guarded(c, [&] {
        using namespace perceiver;
        PerceiverConfig reduced;
        reduced.width = 256;
        reduced.vision_dim = 64;
        const auto start = Clock::now();
        const auto params = PerceiverParams<double>::make(reduced);
        const auto embedder = PatchEmbedder<double>::make(reduced);
        bool shapes = true;
        std::size_t ct_tokens = 0;
        for (std::uint32_t frames : {1u, 2u, 5u, 30u}) {
            imaging::Volume v({frames, 336, 336}, imaging::Unit::Normalized);
            Rng rng(frames);
            for (float& x : v.values) x = static_cast<float>(rng.uniform());
            const auto x = patch_embed(v, embedder);
            if (frames == 30) ct_tokens = x.tokens.rows;
            const auto out = perceiver_forward(x, params);
            shapes = shapes && out.rows == 32 && out.cols == 256 &&
                     std::all_of(out.data.begin(), out.data.end(), [](double d) { return std::isfinite(d); });
        }
        const double reduced_seconds = seconds_since(start);
        c.check(shapes, "reduced-width forward returns 32 latents for F in {1,2,5,30}");
        c.check(ct_tokens == 17280, "F=30 flattens to 17280 visual tokens");
        c.check(reduced_seconds < 60.0, "reduced-width double runs < 60 s");

        const auto full_start = Clock::now();
        const PerceiverConfig full;
        const auto full_embedder = PatchEmbedder<float>::make(full);
        imaging::Volume frame({1, 336, 336}, imaging::Unit::Normalized, 0.5f);
        const auto out = perceiver_forward_streaming(patch_embed(frame, full_embedder), full);
        const double full_seconds = seconds_since(full_start);
        c.check(out.rows == 32 && out.cols == 4096, "full-size forward returns (32, 4096)");
        c.note("reduced_s=" + fmt(reduced_seconds, 3) + " full_forward_s=" + fmt(full_seconds, 3) +
               " ct_tokens=" + std::to_string(ct_tokens));
    });
}

bool criterion_attention_lora() {
    Criterion c(8, "attention and LoRA correctness");
    return guarded(c, [&] {
        using namespace perceiver;
        using testing_support::random_matrix;
        double worst_oracle = 0.0, worst_row = 0.0;
        for (std::size_t heads : {1u, 2u, 4u}) {
            const std::size_t d = 8, dv = 6;
            const auto h = random_matrix(10 + heads, 5, d), x = random_matrix(20 + heads, 7, dv);
            const AttentionWeights<double> w{random_matrix(30 + heads, d, d), random_matrix(40 + heads, d, dv),
                                             random_matrix(50 + heads, d, dv)};
            const auto got = cross_attention(h, x, w, heads);
            worst_oracle = std::max(worst_oracle, testing_support::max_abs_diff(got.output,
                                                                                testing_support::dense_attention(h, x, w, heads)));
            for (const auto& p : got.weights)
                for (std::size_t i = 0; i < p.rows; ++i) {
                    double s = 0;
                    for (std::size_t n = 0; n < p.cols; ++n) s += p(i, n);
                    worst_row = std::max(worst_row, std::abs(s - 1.0));
                }
        }
        c.check(worst_oracle <= 1e-12, "cross_attention matches the dense oracle to 1e-12");
        c.check(worst_row <= 1e-6, "attention rows sum to 1 within 1e-6");

        const std::size_t d = 24, r = 3;
        LoraAdapter<double> identity{random_matrix(60, d, d), random_matrix(61, d, r), Matrix<double>(d, r)};
        const auto v = random_matrix(62, d, 1).data;
        const auto applied = lora_apply(identity, std::span<const double>(v));
        std::vector<double> base_only(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t k = 0; k < d; ++k) base_only[i] += identity.base(i, k) * v[k];
        c.check(applied == base_only, "B=0 adapter equals the base map exactly");

        const LoraAdapter<double> adapter{random_matrix(70, d, d), random_matrix(71, d, r), random_matrix(72, d, r)};
        const auto delta = lora_delta(adapter);
        Eigen::MatrixXd m(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t k = 0; k < d; ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = delta(i, k);
        const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
        const auto& sv = svd.singularValues();
        double tail = 0.0;
        for (Eigen::Index i = static_cast<Eigen::Index>(r); i < sv.size(); ++i) tail = std::max(tail, sv(i));
        c.check(sv(static_cast<Eigen::Index>(r) - 1) > 1e-3 && tail < 1e-8, "rank(delta W) <= r by singular values");

        const double attn = gradcheck_attention(1, 1e-5).max_rel_error;
        const double lora = gradcheck_lora(1, 1e-5).max_rel_error;
        c.check(attn <= 1e-6, "attention gradcheck <= 1e-6");
        c.check(lora <= 1e-8, "LoRA gradcheck <= 1e-8");
        c.note("oracle=" + fmt(worst_oracle, 3) + " row=" + fmt(worst_row, 3) + " sv_tail=" + fmt(tail, 3) +
               " grad_attn=" + fmt(attn, 3) + " grad_lora=" + fmt(lora, 3));
    });
}

bool criterion_aggregation() {
    Criterion c(9, "aggregation math");
    return guarded(c, [&] {
        const auto a = eval::aggregate({1, 2, 3, 4, 5});
        c.check(a.ci_low && std::abs(*a.ci_low - 1.037) <= 1e-3, "lower bound 1.037");
        c.check(a.ci_high && std::abs(*a.ci_high - 4.963) <= 1e-3, "upper bound 4.963");
        const auto flat = eval::aggregate({2, 2, 2, 2, 2});
        c.check(flat.ci_low && flat.ci_high && *flat.ci_low == 2.0 && *flat.ci_high == 2.0,
                "zero variance gives a degenerate interval");

        synth::GeneratorConfig cfg;
        cfg.seed = 314;
        cfg.volumes = {{TaskKind::XrayReport, 40}, {TaskKind::CtReport, 20}, {TaskKind::OutpatientRecord, 40},
                       {TaskKind::FirstCourse, 20}, {TaskKind::AttendingRound, 20}, {TaskKind::ChiefRound, 20}};
        cfg.test_sizes = {{TaskKind::XrayReport, 4}, {TaskKind::CtReport, 3}, {TaskKind::OutpatientRecord, 4},
                          {TaskKind::FirstCourse, 3}, {TaskKind::AttendingRound, 3}, {TaskKind::ChiefRound, 3}};
        cfg.incomplete_rate = 0.0;
        cfg.write_images = false;
        const auto cohort = synth::generate_cohort(cfg);
        const auto samples =
            conversation::build_benchmark(cohort.corpus, cohort.test_ids, conversation::TemplateLibrary::builtin());
        c.check(samples.size() == 20, "mini-benchmark has 20 samples");
        const auto candidates = pipeline::retrieval_baseline(cohort.corpus, cohort.test_ids, samples, 11);

        std::vector<std::map<std::string, std::string>> runs;
        for (std::size_t in_flight : {4u, 1u}) {
            const auto dir = scratch_dir("score");
            eval::StubJudge judge;
            eval::BenchmarkOptions opts;
            opts.max_in_flight = in_flight;
            eval::write_report(eval::run_benchmark(samples, candidates, judge, eval::ExemplarLibrary::builtin(), opts),
                               dir);
            std::map<std::string, std::string> files;
            for (const auto& e : fs::directory_iterator(dir)) files[e.path().filename().string()] = read_file(e.path());
            runs.push_back(std::move(files));
            fs::remove_all(dir);
        }
        c.check(!runs[0].empty() && runs[0] == runs[1], "stub-judge outputs are byte-identical");
        c.note("ci=(" + fmt(*a.ci_low, 5) + ", " + fmt(*a.ci_high, 5) + ") files=" + std::to_string(runs[0].size()));
    });
}

bool criterion_pipeline_determinism() {
    Criterion c(10, "pipeline determinism");
    return guarded(c, [&] {
        const auto config_path = fs::path(MEDCORPUS_SOURCE_DIR) / "configs/default.json";
        const std::string text = read_file(config_path);
        std::vector<std::map<std::string, std::string>> digests;
        std::vector<double> times;
        for (int run = 0; run < 2; ++run) {
            const auto dir = scratch_dir("run");
            auto cfg = pipeline::config_from_json(json::parse(text));
            cfg.out_dir = dir.string();
            const auto start = Clock::now();
            const auto manifest = pipeline::run_pipeline(cfg, text);
            times.push_back(seconds_since(start));
            c.check(manifest.status == "ok", "run status ok");
            digests.push_back(pipeline::artifact_digests(dir));
            fs::remove_all(dir);
        }
        c.check(!digests[0].empty() && digests[0] == digests[1], "artifacts byte-identical across runs");
        c.check(times[0] < 300.0 && times[1] < 300.0, "each run < 5 minutes");
        c.note("artifacts=" + std::to_string(digests[0].size()) + " run_s=" + fmt(times[0], 3) + "," +
               fmt(times[1], 3));
    });
}

}  // namespace

int main() {
    const bool results[] = {
        criterion_dedup_oracle(),   criterion_minhash_accuracy(), criterion_banding(),
        criterion_sampling(),       criterion_preprocessing(),    criterion_conversation(),
        criterion_perceiver_shapes(), criterion_attention_lora(), criterion_aggregation(),
        criterion_pipeline_determinism(),
    };
    const auto passed = std::count(std::begin(results), std::end(results), true);
    std::cout << passed << "/" << std::size(results) << " criteria passed\n";
    return passed == static_cast<long>(std::size(results)) ? 0 : 1;
}
