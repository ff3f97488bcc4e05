// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "febcache/errors.hpp"

namespace febcache {

/// Which sublayer outputs a step reuses instead of recomputing.
enum class CacheTag : unsigned char { None = 0, Attn = 1, Mlp = 2, Both = 3 };

inline constexpr std::array<CacheTag, 4> kAllTags{CacheTag::None, CacheTag::Attn, CacheTag::Mlp, CacheTag::Both};

inline constexpr bool reuses_attn(CacheTag tag) noexcept { return tag == CacheTag::Attn || tag == CacheTag::Both; }
inline constexpr bool reuses_mlp(CacheTag tag) noexcept { return tag == CacheTag::Mlp || tag == CacheTag::Both; }

inline constexpr CacheTag compose_tag(bool reuse_attn, bool reuse_mlp) noexcept {
    return static_cast<CacheTag>((reuse_attn ? 1 : 0) | (reuse_mlp ? 2 : 0));
}

inline constexpr std::string_view to_string(CacheTag tag) noexcept {
    switch (tag) {
        case CacheTag::None: return "none";
        case CacheTag::Attn: return "attn";
        case CacheTag::Mlp: return "mlp";
        case CacheTag::Both: return "both";
    }
    return "none";
}

inline std::ostream& operator<<(std::ostream& os, CacheTag tag) { return os << to_string(tag); }

inline std::optional<CacheTag> parse_tag(std::string_view s) noexcept {
    for (CacheTag tag : kAllTags) {
        if (to_string(tag) == s) return tag;
    }
    return std::nullopt;
}

/// Per-step cache directives for a T-step run. Stored in execution order:
/// position 0 is step T, the last position is step 1.
class CacheTable {
public:
    CacheTable() = default;
    CacheTable(int steps, CacheTag fill) : steps_(steps), tags_(static_cast<std::size_t>(steps), fill) {
        if (steps < 1) throw std::invalid_argument("cache table needs T >= 1");
    }
    CacheTable(int steps, std::vector<CacheTag> in_execution_order)
        : steps_(steps), tags_(std::move(in_execution_order)) {
        if (steps < 1) throw std::invalid_argument("cache table needs T >= 1");
    }

    int steps() const noexcept { return steps_; }
    const std::vector<CacheTag>& execution_order() const noexcept { return tags_; }

    CacheTag at(int t) const { return tags_.at(slot(t)); }
    void set(int t, CacheTag tag) { tags_.at(slot(t)) = tag; }

    /// Count of each tag, indexed by the tag's underlying value.
    std::array<int, 4> histogram() const noexcept {
        std::array<int, 4> h{};
        for (CacheTag tag : tags_) ++h[static_cast<std::size_t>(tag)];
        return h;
    }

    bool operator==(const CacheTable&) const = default;

private:
    std::size_t slot(int t) const {
        if (t < 1 || t > steps_) throw std::out_of_range("cache table step " + std::to_string(t) + " out of range");
        return static_cast<std::size_t>(steps_ - t);
    }

    int steps_ = 0;
    std::vector<CacheTag> tags_;
};

struct TableCheck {
    bool ok = true;
    int step = -1;  // first offending step when !ok
    std::string reason;

    explicit operator bool() const noexcept { return ok; }
};

/// Checks the executable-table rules: one tag per step, steps T and T-1
/// computed fresh, and no component reused before a step computed it.
inline TableCheck validate_table(const CacheTable& table) {
    const int T = table.steps();
    if (T < 1 || table.execution_order().size() != static_cast<std::size_t>(T)) {
        return {false, -1, "tag count does not match T"};
    }
    if (table.at(T) != CacheTag::None) return {false, T, "first step must compute both components"};
    if (T >= 2 && table.at(T - 1) != CacheTag::None) {
        return {false, T - 1, "second step must compute both components"};
    }
    bool attn_written = false;
    bool mlp_written = false;
    for (int t = T; t >= 1; --t) {
        const CacheTag tag = table.at(t);
        if (reuses_attn(tag) && !attn_written) return {false, t, "attention reused before it was computed"};
        if (reuses_mlp(tag) && !mlp_written) return {false, t, "MLP reused before it was computed"};
        attn_written = attn_written || !reuses_attn(tag);
        mlp_written = mlp_written || !reuses_mlp(tag);
    }
    return {};
}

inline void require_valid(const CacheTable& table) {
    if (TableCheck check = validate_table(table); !check) throw InvalidTableError(check.reason, check.step);
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

struct NoCachePolicy {};

/// Recompute both components every `interval` steps, reuse otherwise.
struct IntervalBothPolicy {
    int interval = 1;
};

/// Independent recompute intervals per component.
struct IntervalSeparatePolicy {
    int attn_interval = 1;
    int mlp_interval = 1;
};

struct TableDrivenPolicy {
    CacheTable table;
};

using CachePolicy = std::variant<NoCachePolicy, IntervalBothPolicy, IntervalSeparatePolicy, TableDrivenPolicy>;

/// Expands a policy into a concrete validated table for a T-step run.
/// Interval policies fire on (T - t) mod N == 0; the first two steps are
/// always fresh so every table produced here satisfies validate_table.
inline CacheTable resolve_plan(const CachePolicy& policy, int steps) {
    if (steps < 2) throw std::invalid_argument("resolve_plan: T must be >= 2");
    auto interval_table = [steps](int attn_n, int mlp_n) {
        if (attn_n < 1 || mlp_n < 1) throw std::invalid_argument("cache interval must be >= 1");
        CacheTable table(steps, CacheTag::None);
        for (int t = steps - 2; t >= 1; --t) {
            const int since_start = steps - t;
            table.set(t, compose_tag(since_start % attn_n != 0, since_start % mlp_n != 0));
        }
        return table;
    };

    struct Visitor {
        int steps;
        decltype(interval_table)& make;

        CacheTable operator()(const NoCachePolicy&) const { return CacheTable(steps, CacheTag::None); }
        CacheTable operator()(const IntervalBothPolicy& p) const { return make(p.interval, p.interval); }
        CacheTable operator()(const IntervalSeparatePolicy& p) const {
            return make(p.attn_interval, p.mlp_interval);
        }
        CacheTable operator()(const TableDrivenPolicy& p) const {
            if (p.table.steps() != steps) {
                throw InvalidTableError("table has T=" + std::to_string(p.table.steps()) + " but run has T=" +
                                            std::to_string(steps),
                                        -1);
            }
            require_valid(p.table);
            return p.table;
        }
    };
    return std::visit(Visitor{steps, interval_table}, policy);
}

inline std::string describe(const CachePolicy& policy) {
    struct Visitor {
        std::string operator()(const NoCachePolicy&) const { return "no-cache"; }
        std::string operator()(const IntervalBothPolicy& p) const {
            return "interval-both(" + std::to_string(p.interval) + ")";
        }
        std::string operator()(const IntervalSeparatePolicy& p) const {
            return "interval-separate(" + std::to_string(p.attn_interval) + "," + std::to_string(p.mlp_interval) + ")";
        }
        std::string operator()(const TableDrivenPolicy& p) const {
            return "table(T=" + std::to_string(p.table.steps()) + ")";
        }
    };
    return std::visit(Visitor{}, policy);
}

// ---------------------------------------------------------------------------
// JSON: {"T": int, "tags": ["none" | "attn" | "mlp" | "both", ...]} listed
// from step T down to step 1. Unknown extra fields are ignored.
// ---------------------------------------------------------------------------

inline nlohmann::json table_to_json(const CacheTable& table) {
    nlohmann::json tags = nlohmann::json::array();
    for (CacheTag tag : table.execution_order()) tags.push_back(std::string(to_string(tag)));
    return {{"T", table.steps()}, {"tags", std::move(tags)}};
}

inline CacheTable table_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("T") || !j.contains("tags") || !j["T"].is_number_integer() ||
        !j["tags"].is_array()) {
        throw InvalidTableError("cache table JSON needs integer \"T\" and array \"tags\"", -1);
    }
    const int T = j["T"].get<int>();
    const auto& arr = j["tags"];
    if (T < 1 || arr.size() != static_cast<std::size_t>(T)) {
        throw InvalidTableError("cache table lists " + std::to_string(arr.size()) + " tags for T=" +
                                    std::to_string(T),
                                -1);
    }
    std::vector<CacheTag> tags;
    tags.reserve(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const int step = T - static_cast<int>(i);
        if (!arr[i].is_string()) throw InvalidTableError("tag is not a string", step);
        auto tag = parse_tag(arr[i].get<std::string>());
        if (!tag) throw InvalidTableError("unknown tag \"" + arr[i].get<std::string>() + "\"", step);
        tags.push_back(*tag);
    }
    return CacheTable(T, std::move(tags));
}

}  // namespace febcache
