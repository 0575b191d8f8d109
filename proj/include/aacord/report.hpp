#ifndef AACORD_REPORT_HPP
#define AACORD_REPORT_HPP

/** \file report.hpp
    \brief Machine-readable residual reports: one record per numerical
           certificate, serialized deterministically (sorted keys).
*/

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace aacord {

using Json = nlohmann::json;

/** One numerical certificate: which hypothesis was checked, against what
    tolerance, and what the worst residual was. `anchor` names the
    hypothesis in mathematical terms (e.g. "structure matrix has constant
    corank 2n-k"); `assumed` lists hypotheses the check relies on but does
    not certify (connectedness, completeness beyond the probe window). */
struct CheckRecord {
    std::string name;
    std::string anchor;
    bool pass = false;
    double max_residual = 0.0;
    double tolerance = 0.0;
    int sample_count = 0;
    Json details = Json::object();
    std::vector<std::string> assumed;

    Json to_json() const {
        Json j;
        j["name"] = name;
        j["anchor"] = anchor;
        j["pass"] = pass;
        j["max_residual"] = max_residual;
        j["tolerance"] = tolerance;
        j["sample_count"] = sample_count;
        if (!details.empty()) j["details"] = details;
        if (!assumed.empty()) j["assumed_hypotheses"] = assumed;
        return j;
    }
};

/// Aggregate of certificates for one invocation; overall pass is the
/// conjunction of member passes.
struct ResidualReport {
    int schema = 1;
    std::string system;
    std::uint64_t seed = 42;
    std::vector<CheckRecord> records;

    bool overall_pass() const {
        for (const auto& r : records)
            if (!r.pass) return false;
        return true;
    }

    const CheckRecord* find(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }

    void add(CheckRecord rec) { records.push_back(std::move(rec)); }

    Json to_json() const {
        Json j;
        j["schema"] = schema;
        j["system"] = system;
        j["seed"] = seed;
        j["overall_pass"] = overall_pass();
        Json arr = Json::array();
        for (const auto& r : records) arr.push_back(r.to_json());
        j["checks"] = arr;
        return j;
    }

    /// Deterministic text form: nlohmann::json emits object keys sorted.
    std::string to_string(int indent = 2) const { return to_json().dump(indent); }
};

} // namespace aacord

#endif // AACORD_REPORT_HPP
