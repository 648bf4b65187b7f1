#include "medcorpus/sampling.hpp"

#include <algorithm>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace medcorpus::sampling {

namespace {

std::string_view mode_name(RuleMode mode) {
    switch (mode) {
        case RuleMode::All: return "all";
        case RuleMode::WindowAll: return "window_all";
        case RuleMode::RoundRobin: return "round_robin";
    }
    return "?";
}

RuleMode mode_from_name(std::string_view name) {
    if (name == "all") return RuleMode::All;
    if (name == "window_all") return RuleMode::WindowAll;
    if (name == "round_robin") return RuleMode::RoundRobin;
    throw ValidationError("plan: unknown rule mode '" + std::string(name) + "'");
}

TaskRule round_robin(std::int64_t lo, std::int64_t hi, std::int64_t cap, bool to_target) {
    return {RuleMode::RoundRobin, SizeWindow{lo, hi}, cap, to_target};
}

void fill_histogram(TaskSelection& sel, const std::vector<PoolItem>& pool) {
    std::unordered_map<std::string, const PoolItem*> by_id;
    for (const auto& item : pool) by_id.emplace(item.id, &item);
    for (const auto& id : sel.ids) {
        const auto& labels = by_id.at(id)->labels;
        if (labels.empty()) {
            ++sel.histogram[unlabeled];
        }
        for (const auto& l : labels) ++sel.histogram[l];
    }
}

TaskSelection select_all(const std::vector<PoolItem>& pool) {
    TaskSelection sel;
    for (const auto& item : pool) sel.ids.push_back(item.id);
    for (const auto& [label, ids] : categorize(pool)) sel.included_categories.push_back(label);
    fill_histogram(sel, pool);
    return sel;
}

std::vector<std::string> in_window(const std::map<std::string, std::vector<std::string>>& categories,
                                   const SizeWindow& window) {
    std::vector<std::string> out;
    for (const auto& [label, ids] : categories) {
        if (window.contains(static_cast<std::int64_t>(ids.size()))) out.push_back(label);
    }
    return out;
}

TaskSelection select_window_all(const std::vector<PoolItem>& pool, const SizeWindow& window) {
    TaskSelection sel;
    const auto categories = categorize(pool);
    sel.included_categories = in_window(categories, window);
    std::set<std::string> chosen;
    for (const auto& label : sel.included_categories) {
        const auto& ids = categories.at(label);
        chosen.insert(ids.begin(), ids.end());
    }
    sel.ids.assign(chosen.begin(), chosen.end());
    fill_histogram(sel, pool);
    return sel;
}

TaskSelection select_round_robin(TaskKind task, const std::vector<PoolItem>& pool, const TaskRule& rule,
                                 std::optional<std::int64_t> target, std::uint64_t seed,
                                 std::vector<PassRecord>& audit, std::vector<std::string>& warnings) {
    TaskSelection sel;
    const auto categories = categorize(pool);
    sel.included_categories = in_window(categories, *rule.window);
    if (sel.included_categories.empty()) {
        warnings.push_back("task " + std::to_string(task_code(task)) + ": no category with size in [" +
                           std::to_string(rule.window->min) + ", " + std::to_string(rule.window->max) +
                           "]; selection is empty");
        return sel;
    }
    const std::int64_t cap = *rule.cap;
    const std::unordered_set<std::string> included(sel.included_categories.begin(), sel.included_categories.end());

    std::unordered_map<std::string, std::vector<const std::string*>> included_labels_of;
    for (const auto& item : pool) {
        auto& labels = included_labels_of[item.id];
        for (const auto& l : item.labels) {
            if (included.contains(l)) labels.push_back(&l);
        }
    }

    struct Queue {
        const std::string* label;
        std::vector<std::string> order;
        std::size_t next = 0;
    };
    std::vector<Queue> queues;
    for (const auto& label : sel.included_categories) {
        Queue q{&label, categories.at(label), 0};
        Rng rng(derive_seed(seed, "stage-draw/" + std::to_string(task_code(task)) + "/" + label));
        rng.shuffle(q.order);
        queues.push_back(std::move(q));
    }
    std::unordered_map<std::string, std::int64_t> counts;
    std::unordered_set<std::string> taken;

    auto eligible = [&](const std::string& id) {
        if (taken.contains(id)) return false;
        const auto& labels = included_labels_of.at(id);
        return std::all_of(labels.begin(), labels.end(), [&](const std::string* l) { return counts[*l] < cap; });
    };

    std::int64_t total = 0;
    for (std::int64_t pass = 1;; ++pass) {
        if (target && total >= *target) break;
        std::int64_t drawn = 0;
        for (auto& q : queues) {
            if (counts[*q.label] >= cap) continue;
            while (q.next < q.order.size() && !eligible(q.order[q.next])) ++q.next;
            if (q.next == q.order.size()) continue;
            const std::string& id = q.order[q.next++];
            taken.insert(id);
            sel.ids.push_back(id);
            for (const std::string* l : included_labels_of.at(id)) ++counts[*l];
            ++drawn;
            ++total;
        }
        if (drawn == 0) break;
        audit.push_back({task, pass, drawn, total});
    }
    std::sort(sel.ids.begin(), sel.ids.end());
    fill_histogram(sel, pool);
    return sel;
}

json task_rule_to_json(const TaskRule& r) {
    json j = {{"mode", mode_name(r.mode)}};
    if (r.window) j["window"] = {r.window->min, r.window->max};
    if (r.cap) j["cap"] = *r.cap;
    if (r.target_inpatient_total) j["target"] = "inpatient_total";
    return j;
}

TaskRule task_rule_from_json(const json& j, const std::string& context) {
    StrictObject obj(j, context);
    TaskRule r;
    r.mode = mode_from_name(obj.get<std::string>("mode"));
    if (obj.has("window")) {
        const auto w = obj.get<std::vector<std::int64_t>>("window");
        if (w.size() != 2) throw ValidationError(context + ".window: expected [min, max]");
        r.window = SizeWindow{w[0], w[1]};
    }
    if (obj.has("cap")) r.cap = obj.get<std::int64_t>("cap");
    if (obj.has("target")) {
        const auto t = obj.get<std::string>("target");
        if (t != "inpatient_total") throw ValidationError(context + ".target: only 'inpatient_total' is supported");
        r.target_inpatient_total = true;
    }
    obj.finish();
    return r;
}

}  // namespace

StagePlan StagePlan::defaults(int stage, std::uint64_t seed) {
    StagePlan plan;
    plan.stage = stage;
    plan.seed = seed;
    switch (stage) {
        case 1:
            plan.rules[TaskKind::XrayReport] = {};
            plan.rules[TaskKind::CtReport] = {};
            plan.rules[TaskKind::OutpatientRecord] = {};
            break;
        case 2:
            plan.rules[TaskKind::XrayReport] = {};
            plan.rules[TaskKind::CtReport] = {};
            plan.rules[TaskKind::OutpatientRecord] = round_robin(325, 5000, 500, true);
            plan.rules[TaskKind::FirstCourse] = {};
            plan.rules[TaskKind::AttendingRound] = {};
            plan.rules[TaskKind::ChiefRound] = {};
            break;
        case 3: {
            plan.rules[TaskKind::XrayReport] = round_robin(100, 2000, 500, false);
            plan.rules[TaskKind::CtReport] = {};
            plan.rules[TaskKind::OutpatientRecord] = round_robin(325, 5000, 200, false);
            const TaskRule inpatient{RuleMode::WindowAll, SizeWindow{40, 500}, std::nullopt, false};
            plan.rules[TaskKind::FirstCourse] = inpatient;
            plan.rules[TaskKind::AttendingRound] = inpatient;
            plan.rules[TaskKind::ChiefRound] = inpatient;
            break;
        }
        default:
            throw ValidationError("plan: stage must be 1, 2 or 3");
    }
    return plan;
}

void StagePlan::validate() const {
    if (stage < 1 || stage > 3) {
        throw ValidationError("plan: stage must be 1, 2 or 3");
    }
    for (const auto& [task, rule] : rules) {
        const std::string ctx = "plan rule for task " + std::to_string(task_code(task));
        if (rule.window && (rule.window->min < 1 || rule.window->max < rule.window->min)) {
            throw ValidationError(ctx + ": window must satisfy 1 <= min <= max");
        }
        if (rule.cap && *rule.cap < 1) {
            throw ValidationError(ctx + ": cap must be positive");
        }
        if (rule.mode != RuleMode::All && !rule.window) {
            throw ValidationError(ctx + ": mode requires a window");
        }
        if (rule.mode == RuleMode::RoundRobin && !rule.cap) {
            throw ValidationError(ctx + ": round_robin requires a cap");
        }
        if (rule.target_inpatient_total && rule.mode != RuleMode::RoundRobin) {
            throw ValidationError(ctx + ": a target applies only to round_robin");
        }
        if (rule.target_inpatient_total && is_inpatient_task(task)) {
            throw ValidationError(ctx + ": inpatient tasks cannot target the inpatient total");
        }
    }
}

json to_json(const StagePlan& plan) {
    json rules = json::object();
    for (const auto& [task, rule] : plan.rules) rules[std::to_string(task_code(task))] = task_rule_to_json(rule);
    return {{"stage", plan.stage}, {"seed", plan.seed}, {"rules", rules}};
}

StagePlan plan_from_json(const json& j) {
    StrictObject obj(j, "plan");
    StagePlan plan;
    plan.stage = obj.get<int>("stage");
    plan.seed = obj.get_or<std::uint64_t>("seed", 0);
    const json& rules = obj.at("rules");
    if (!rules.is_object()) throw ValidationError("plan.rules: expected an object keyed by task number");
    for (const auto& [key, value] : rules.items()) {
        plan.rules[task_from_code(std::stoi(key))] = task_rule_from_json(value, "plan.rules." + key);
    }
    obj.finish();
    plan.validate();
    return plan;
}

// ---------------------------------------------------------------------------

Pools build_pools(const Corpus& corpus, const synth::TestSplit& test_ids,
                  const std::optional<std::set<std::string>>& dedup_kept) {
    std::unordered_set<std::string> blocked;
    for (const auto& [task, ids] : test_ids) blocked.insert(ids.begin(), ids.end());
    Pools pools;
    for (TaskKind t : all_tasks) pools[t];
    for (const auto& s : corpus.studies) {
        if (!blocked.contains(s.study_id)) {
            pools[task_for_modality(s.modality)].push_back({s.study_id, s.disease_labels});
        }
    }
    for (const auto& r : corpus.records) {
        if (blocked.contains(r.record_id)) continue;
        if (r.task_kind == TaskKind::OutpatientRecord && dedup_kept && !dedup_kept->contains(r.record_id)) continue;
        pools[r.task_kind].push_back({r.record_id, r.disease_labels});
    }
    for (auto& [task, items] : pools) {
        std::sort(items.begin(), items.end(), [](const PoolItem& a, const PoolItem& b) { return a.id < b.id; });
    }
    return pools;
}

std::map<std::string, std::vector<std::string>> categorize(const std::vector<PoolItem>& items) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& item : items) {
        if (item.labels.empty()) {
            out[unlabeled].push_back(item.id);
            continue;
        }
        // A label repeated within one record counts once.
        std::set<std::string> unique(item.labels.begin(), item.labels.end());
        for (const auto& l : unique) out[l].push_back(item.id);
    }
    for (auto& [label, ids] : out) std::sort(ids.begin(), ids.end());
    return out;
}

std::size_t SelectionResult::total() const {
    std::size_t n = 0;
    for (const auto& [task, sel] : tasks) n += sel.ids.size();
    return n;
}

SelectionResult run_plan(const Pools& pools, const StagePlan& plan) {
    plan.validate();
    SelectionResult result;
    result.stage = plan.stage;
    result.seed = plan.seed;
    static const std::vector<PoolItem> empty;
    auto pool_of = [&](TaskKind t) -> const std::vector<PoolItem>& {
        const auto it = pools.find(t);
        return it == pools.end() ? empty : it->second;
    };

    std::vector<TaskKind> deferred;
    for (const auto& [task, rule] : plan.rules) {
        if (rule.target_inpatient_total) {
            deferred.push_back(task);
            continue;
        }
        const auto& pool = pool_of(task);
        switch (rule.mode) {
            case RuleMode::All: result.tasks[task] = select_all(pool); break;
            case RuleMode::WindowAll: result.tasks[task] = select_window_all(pool, *rule.window); break;
            case RuleMode::RoundRobin:
                result.tasks[task] =
                    select_round_robin(task, pool, rule, std::nullopt, plan.seed, result.audit, result.warnings);
                break;
        }
    }
    std::int64_t inpatient_total = 0;
    for (const auto& [task, sel] : result.tasks) {
        if (is_inpatient_task(task)) inpatient_total += static_cast<std::int64_t>(sel.ids.size());
    }
    for (TaskKind task : deferred) {
        result.tasks[task] = select_round_robin(task, pool_of(task), plan.rules.at(task), inpatient_total, plan.seed,
                                                result.audit, result.warnings);
    }
    return result;
}

SelectionResult stage1_select(const Pools& pools) { return run_plan(pools, StagePlan::defaults(1, 0)); }

SelectionResult stage2_balance(const Pools& pools, const StagePlan& plan) {
    if (plan.stage != 2) throw ValidationError("stage2_balance: plan is for stage " + std::to_string(plan.stage));
    return run_plan(pools, plan);
}

SelectionResult stage3_balance(const Pools& pools, const StagePlan& plan) {
    if (plan.stage != 3) throw ValidationError("stage3_balance: plan is for stage " + std::to_string(plan.stage));
    return run_plan(pools, plan);
}

// ---------------------------------------------------------------------------

json to_json(const SelectionResult& r) {
    json tasks = json::object();
    for (const auto& [task, sel] : r.tasks) {
        tasks[std::to_string(task_code(task))] = {{"ids", sel.ids},
                                                  {"included_categories", sel.included_categories},
                                                  {"histogram", sel.histogram},
                                                  {"count", sel.ids.size()}};
    }
    json audit = json::array();
    for (const auto& p : r.audit) {
        audit.push_back({{"task", task_code(p.task)}, {"pass", p.pass}, {"drawn", p.drawn}, {"total", p.total}});
    }
    return {{"stage", r.stage}, {"seed", r.seed}, {"tasks", tasks}, {"audit", audit}, {"warnings", r.warnings}};
}

SelectionResult selection_from_json(const json& j) {
    StrictObject obj(j, "selection");
    SelectionResult r;
    r.stage = obj.get<int>("stage");
    r.seed = obj.get<std::uint64_t>("seed");
    for (const auto& [key, value] : obj.at("tasks").items()) {
        StrictObject t(value, "selection.tasks." + key);
        TaskSelection sel;
        sel.ids = t.get<std::vector<std::string>>("ids");
        sel.included_categories = t.get<std::vector<std::string>>("included_categories");
        sel.histogram = t.get<std::map<std::string, std::int64_t>>("histogram");
        t.at("count");
        t.finish();
        r.tasks[task_from_code(std::stoi(key))] = std::move(sel);
    }
    for (const auto& p : obj.at("audit")) {
        StrictObject a(p, "selection.audit");
        r.audit.push_back({task_from_code(a.get<int>("task")), a.get<std::int64_t>("pass"),
                           a.get<std::int64_t>("drawn"), a.get<std::int64_t>("total")});
        a.finish();
    }
    r.warnings = obj.get<std::vector<std::string>>("warnings");
    obj.finish();
    return r;
}

DistributionTable distribution_report(const SelectionResult& result) {
    DistributionTable table;
    for (const auto& [task, sel] : result.tasks) {
        if (sel.ids.empty()) continue;
        const std::set<std::string> included(sel.included_categories.begin(), sel.included_categories.end());
        BalanceSummary summary;
        summary.min_count = std::numeric_limits<std::int64_t>::max();
        for (const auto& [label, count] : sel.histogram) {
            const bool in = included.contains(label);
            table.rows.push_back({task, label, count, in});
            if (in && count > 0) {
                ++summary.categories;
                summary.max_count = std::max(summary.max_count, count);
                summary.min_count = std::min(summary.min_count, count);
            }
        }
        if (summary.categories > 0) {
            summary.ratio = static_cast<double>(summary.max_count) / static_cast<double>(summary.min_count);
            table.balance[task] = summary;
        }
    }
    return table;
}

std::string to_csv(const DistributionTable& table) {
    std::ostringstream out;
    out << "task,label,count,included\n";
    for (const auto& row : table.rows) {
        std::string label = row.label;
        if (label.find_first_of(",\"\n") != std::string::npos) {
            std::string quoted = "\"";
            for (char c : label) {
                if (c == '"') quoted += '"';
                quoted += c;
            }
            label = quoted + "\"";
        }
        out << task_code(row.task) << ',' << label << ',' << row.count << ',' << (row.included ? 1 : 0) << '\n';
    }
    return out.str();
}

}  // namespace medcorpus::sampling
