#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "medcorpus/corpus.hpp"
#include "medcorpus/synthgen.hpp"

namespace medcorpus::sampling {

/// Label used for records without any disease label.
inline constexpr const char* unlabeled = "UNLABELED";

enum class RuleMode {
    /// Every record of the task.
    All,
    /// Every record carrying at least one label whose category size is in the window.
    WindowAll,
    /// Round-robin draws over in-window categories, capped per category.
    RoundRobin,
};

struct SizeWindow {
    std::int64_t min = 1;
    std::int64_t max = 1;

    bool contains(std::int64_t n) const { return n >= min && n <= max; }
    bool operator==(const SizeWindow&) const = default;
};

struct TaskRule {
    RuleMode mode = RuleMode::All;
    std::optional<SizeWindow> window;
    std::optional<std::int64_t> cap;
    /// Stop round-robin once the selected total reaches the inpatient total
    /// of the same stage.
    bool target_inpatient_total = false;

    bool operator==(const TaskRule&) const = default;
};

struct StagePlan {
    int stage = 1;
    std::uint64_t seed = 0;
    /// Tasks without a rule contribute nothing to the stage.
    std::map<TaskKind, TaskRule> rules;

    /// The published selection rules for stages 1, 2 and 3.
    static StagePlan defaults(int stage, std::uint64_t seed);

    void validate() const;
    bool operator==(const StagePlan&) const = default;
};

json to_json(const StagePlan& plan);
StagePlan plan_from_json(const json& j);

struct PoolItem {
    std::string id;
    std::vector<std::string> labels;
};

/// Candidate records per task, sorted by id.
using Pools = std::map<TaskKind, std::vector<PoolItem>>;

/// Test ids are removed from every task. When `dedup_kept` is given, the
/// outpatient pool is restricted to it.
Pools build_pools(const Corpus& corpus, const synth::TestSplit& test_ids,
                  const std::optional<std::set<std::string>>& dedup_kept);

/// label -> sorted ids. Multi-label items appear under every label; items
/// without labels go under UNLABELED.
std::map<std::string, std::vector<std::string>> categorize(const std::vector<PoolItem>& items);

struct PassRecord {
    TaskKind task = TaskKind::OutpatientRecord;
    std::int64_t pass = 0;
    std::int64_t drawn = 0;
    std::int64_t total = 0;

    bool operator==(const PassRecord&) const = default;
};

struct TaskSelection {
    std::vector<std::string> ids;
    /// Categories the rule admitted (all present labels for RuleMode::All).
    std::vector<std::string> included_categories;
    /// Per-label counts over selected records; multi-label records count
    /// under each of their labels.
    std::map<std::string, std::int64_t> histogram;

    bool operator==(const TaskSelection&) const = default;
};

struct SelectionResult {
    int stage = 1;
    std::uint64_t seed = 0;
    std::map<TaskKind, TaskSelection> tasks;
    std::vector<PassRecord> audit;
    std::vector<std::string> warnings;

    std::size_t total() const;
    bool operator==(const SelectionResult&) const = default;
};

json to_json(const SelectionResult& result);
SelectionResult selection_from_json(const json& j);

/// Applies a plan: non-target tasks first, then round-robin tasks whose
/// target is the inpatient total.
SelectionResult run_plan(const Pools& pools, const StagePlan& plan);

/// All X-ray, CT and outpatient candidates; no inpatient records.
SelectionResult stage1_select(const Pools& pools);
SelectionResult stage2_balance(const Pools& pools, const StagePlan& plan);
SelectionResult stage3_balance(const Pools& pools, const StagePlan& plan);

struct DistributionRow {
    TaskKind task = TaskKind::XrayReport;
    std::string label;
    std::int64_t count = 0;
    bool included = false;
};

struct BalanceSummary {
    std::size_t categories = 0;
    std::int64_t max_count = 0;
    std::int64_t min_count = 0;
    /// max/min over included categories with a non-zero count.
    double ratio = 0.0;
};

struct DistributionTable {
    std::vector<DistributionRow> rows;
    std::map<TaskKind, BalanceSummary> balance;
};

DistributionTable distribution_report(const SelectionResult& result);

/// "task,label,count,included" with one row per (task, label).
std::string to_csv(const DistributionTable& table);

}  // namespace medcorpus::sampling
