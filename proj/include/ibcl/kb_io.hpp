#pragma once

// JSON persistence for KnowledgeBase. Layout:
//   { "version": 1,
//     "arch": {"input": I, "hidden": H, "output": 1, "bias": true},
//     "m": M,
//     "tasks": [ { "task_index": i,
//                  "stored": [ {"id", "prior_index", "mu": [...], "sigma": [...]} ],
//                  "substitutions": [ {"prior_index", "reused_point_id"} ] } ],
//     "buffer_history": [...],
//     "priors": [ {"mu", "sigma"} ]      // only while no task has been learned
//   }
// Doubles are written in shortest round-trip form, so save/load is bit-exact.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "error.hpp"
#include "knowledge_base.hpp"

namespace ibcl {

inline constexpr int kKbFormatVersion = 1;

namespace detail {

inline nlohmann::json vec_to_json(const Vec& v) {
    return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline nlohmann::json gaussian_to_json(const DiagGaussian& g) {
    return {{"mu", vec_to_json(g.mean())}, {"sigma", vec_to_json(g.stdev())}};
}

// Field access that reports the JSON path of whatever is wrong.
class JsonReader {
public:
    const nlohmann::json& at(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        if (!obj.is_object()) fail(path, "expected an object");
        auto it = obj.find(key);
        if (it == obj.end()) fail(path + "/" + key, "missing field");
        return *it;
    }

    template <class T>
    T get(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        const auto& v = at(obj, key, path);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) fail(path + "/" + key, "expected a boolean");
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!non_negative_integer(v)) fail(path + "/" + key, "expected a non-negative integer");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) fail(path + "/" + key, "expected an integer");
            }
            return v.get<T>();
        } catch (const nlohmann::json::exception&) {
            fail(path + "/" + key, "wrong type");
        }
    }

    static bool non_negative_integer(const nlohmann::json& v) {
        return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    }

    const nlohmann::json& array(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        const auto& v = at(obj, key, path);
        if (!v.is_array()) fail(path + "/" + key, "expected an array");
        return v;
    }

    Vec vec(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        const auto& arr = array(obj, key, path);
        Vec out(static_cast<Eigen::Index>(arr.size()));
        for (std::size_t i = 0; i < arr.size(); ++i) {
            if (!arr[i].is_number()) fail(path + "/" + key + "/" + std::to_string(i), "expected a number");
            out[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
        }
        return out;
    }

    DiagGaussian gaussian(const nlohmann::json& obj, const std::string& path) const {
        try {
            return DiagGaussian(vec(obj, "mu", path), vec(obj, "sigma", path));
        } catch (const ValidationError& e) {
            fail(path, e.what());
        }
    }

    [[noreturn]] static void fail(const std::string& path, const std::string& what) {
        throw ValidationError("knowledge base file: " + (path.empty() ? std::string("/") : path) + ": " + what);
    }
};

} // namespace detail

inline nlohmann::json kb_to_json(const KnowledgeBase& kb) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : kb.tasks()) {
        nlohmann::json stored = nlohmann::json::array();
        for (const auto& p : t.stored) {
            nlohmann::json jp = detail::gaussian_to_json(p.dist);
            jp["id"] = p.id;
            jp["prior_index"] = p.prior_index;
            stored.push_back(std::move(jp));
        }
        nlohmann::json subs = nlohmann::json::array();
        for (const auto& s : t.substitutions)
            subs.push_back({{"prior_index", s.prior_index}, {"reused_point_id", s.reused_point_id}});
        tasks.push_back({{"task_index", t.task_index}, {"stored", std::move(stored)}, {"substitutions", std::move(subs)}});
    }
    nlohmann::json doc = {
        {"version", kKbFormatVersion},
        {"arch", {{"input", kb.arch().input_dim}, {"hidden", kb.arch().hidden_dim}, {"output", 1}, {"bias", kb.arch().bias}}},
        {"m", kb.m()},
        {"tasks", std::move(tasks)},
        {"buffer_history", kb.buffer_history()},
    };
    if (!kb.initial_priors().empty()) {
        nlohmann::json priors = nlohmann::json::array();
        for (const auto& p : kb.initial_priors()) priors.push_back(detail::gaussian_to_json(p));
        doc["priors"] = std::move(priors);
    }
    return doc;
}

inline KnowledgeBase kb_from_json(const nlohmann::json& doc) {
    detail::JsonReader r;
    if (!doc.is_object()) detail::JsonReader::fail("", "expected an object");
    const auto version = r.get<long long>(doc, "version", "");
    if (version != kKbFormatVersion)
        throw ValidationError("knowledge base file: unsupported version " + std::to_string(version) + " (expected " +
                              std::to_string(kKbFormatVersion) + ")");

    const auto& ja = r.at(doc, "arch", "");
    BnnArchitecture arch;
    arch.input_dim = r.get<std::size_t>(ja, "input", "/arch");
    arch.hidden_dim = r.get<std::size_t>(ja, "hidden", "/arch");
    if (r.get<std::size_t>(ja, "output", "/arch") != 1) detail::JsonReader::fail("/arch/output", "must be 1");
    if (ja.contains("bias")) arch.bias = r.get<bool>(ja, "bias", "/arch");

    const auto m = r.get<std::size_t>(doc, "m", "");
    std::vector<TaskEntry> tasks;
    const auto& jt = r.array(doc, "tasks", "");
    for (std::size_t i = 0; i < jt.size(); ++i) {
        const std::string path = "/tasks/" + std::to_string(i);
        TaskEntry t;
        t.task_index = r.get<std::size_t>(jt[i], "task_index", path);
        const auto& js = r.array(jt[i], "stored", path);
        for (std::size_t k = 0; k < js.size(); ++k) {
            const std::string pp = path + "/stored/" + std::to_string(k);
            t.stored.push_back(ExtremePoint{r.get<PointId>(js[k], "id", pp), t.task_index,
                                            r.get<std::size_t>(js[k], "prior_index", pp), r.gaussian(js[k], pp)});
        }
        const auto& jsub = r.array(jt[i], "substitutions", path);
        for (std::size_t k = 0; k < jsub.size(); ++k) {
            const std::string sp = path + "/substitutions/" + std::to_string(k);
            t.substitutions.push_back(SubstitutionRecord{t.task_index, r.get<std::size_t>(jsub[k], "prior_index", sp),
                                                         r.get<PointId>(jsub[k], "reused_point_id", sp)});
        }
        tasks.push_back(std::move(t));
    }
    std::vector<std::size_t> history;
    const auto& jh = r.array(doc, "buffer_history", "");
    for (std::size_t i = 0; i < jh.size(); ++i) {
        if (!detail::JsonReader::non_negative_integer(jh[i]))
            detail::JsonReader::fail("/buffer_history/" + std::to_string(i), "expected a non-negative integer");
        history.push_back(jh[i].get<std::size_t>());
    }
    std::vector<DiagGaussian> priors;
    if (doc.contains("priors")) {
        const auto& jp = r.array(doc, "priors", "");
        for (std::size_t i = 0; i < jp.size(); ++i) priors.push_back(r.gaussian(jp[i], "/priors/" + std::to_string(i)));
    }
    try {
        return KnowledgeBase::assemble(arch, m, std::move(priors), std::move(tasks), std::move(history));
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("knowledge base file: ") + e.what());
    }
}

inline void save_kb(const KnowledgeBase& kb, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeError("save_kb: cannot open " + path);
    out << kb_to_json(kb).dump();
    if (!out) throw RuntimeError("save_kb: write failed for " + path);
}

inline KnowledgeBase load_kb(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("load_kb: cannot open " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("knowledge base file: malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    return kb_from_json(doc);
}

} // namespace ibcl
