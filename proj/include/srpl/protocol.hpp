#pragma once

// srpl-seg/1: line-delimited JSON between the pipeline and an external
// segmenter or source-model provider. Tensors travel as SRT file paths.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srpl/error.hpp"
#include "srpl/segmenter.hpp"

namespace srpl::protocol {

inline constexpr const char* kName = "srpl-seg/1";

inline std::string handshake_line() { return nlohmann::json{{"proto", kName}}.dump(); }

enum class Op { segment, predict };

inline const char* to_string(Op op) { return op == Op::segment ? "segment" : "predict"; }

struct Request {
    std::int64_t id = 0;
    Op op = Op::segment;
    std::string image;               // SRT f32 path; (3,H,W) for segment, (1|3,H,W) for predict
    std::optional<BoxPrompt> box;    // segment only
};

/// Successful responses carry "mask" (segment) or "probs" (predict).
struct Response {
    std::int64_t id = 0;
    bool ok = false;
    std::string path;
    std::string error;
};

inline nlohmann::json to_json(const Request& r) {
    nlohmann::json j{{"id", r.id}, {"op", to_string(r.op)}, {"image", r.image}};
    if (r.box) j["box"] = {r.box->xmin, r.box->ymin, r.box->xmax, r.box->ymax};
    return j;
}

inline nlohmann::json to_json(const Response& r, Op op) {
    if (!r.ok) return {{"id", r.id}, {"ok", false}, {"error", r.error}};
    return {{"id", r.id}, {"ok", true}, {op == Op::segment ? "mask" : "probs", r.path}};
}

namespace detail {

inline bool is_int(const nlohmann::json& j) { return j.is_number_integer() || j.is_number_unsigned(); }

inline std::optional<nlohmann::json> parse_object(const std::string& line, std::vector<std::string>& issues) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
        issues.push_back("not valid JSON");
        return std::nullopt;
    }
    if (!j.is_object()) {
        issues.push_back("top level is not an object");
        return std::nullopt;
    }
    return j;
}

}  // namespace detail

/// Empty result = conforming handshake line.
inline std::vector<std::string> lint_handshake(const std::string& line) {
    std::vector<std::string> issues;
    auto j = detail::parse_object(line, issues);
    if (!j) return issues;
    if (!j->contains("proto") || !(*j)["proto"].is_string()) {
        issues.push_back("missing string field 'proto'");
    } else if ((*j)["proto"] != kName) {
        issues.push_back("unsupported protocol '" + (*j)["proto"].get<std::string>() + "'");
    }
    return issues;
}

inline std::vector<std::string> lint_request(const std::string& line) {
    std::vector<std::string> issues;
    auto j = detail::parse_object(line, issues);
    if (!j) return issues;
    if (!j->contains("id") || !detail::is_int((*j)["id"])) issues.push_back("missing integer field 'id'");
    if (!j->contains("image") || !(*j)["image"].is_string() || (*j)["image"].get<std::string>().empty()) {
        issues.push_back("missing string field 'image'");
    }
    const auto op = j->contains("op") && (*j)["op"].is_string() ? (*j)["op"].get<std::string>() : std::string();
    if (op == "segment") {
        const auto& box = j->contains("box") ? (*j)["box"] : nlohmann::json();
        bool good = box.is_array() && box.size() == 4;
        for (std::size_t k = 0; good && k < 4; ++k) good = detail::is_int(box[k]) && box[k].get<std::int64_t>() >= 0;
        if (good) good = box[0].get<std::int64_t>() <= box[2].get<std::int64_t>() &&
                         box[1].get<std::int64_t>() <= box[3].get<std::int64_t>();
        if (!good) issues.push_back("'box' must be [xmin, ymin, xmax, ymax] non-negative integers, min <= max");
    } else if (op == "predict") {
        if (j->contains("box")) issues.push_back("'box' is not allowed for op 'predict'");
    } else {
        issues.push_back("'op' must be 'segment' or 'predict'");
    }
    return issues;
}

/// `op` selects which payload key a successful response must carry.
inline std::vector<std::string> lint_response(const std::string& line, Op op) {
    std::vector<std::string> issues;
    auto j = detail::parse_object(line, issues);
    if (!j) return issues;
    if (!j->contains("id") || !detail::is_int((*j)["id"])) issues.push_back("missing integer field 'id'");
    if (!j->contains("ok") || !(*j)["ok"].is_boolean()) {
        issues.push_back("missing boolean field 'ok'");
        return issues;
    }
    const char* key = op == Op::segment ? "mask" : "probs";
    if ((*j)["ok"].get<bool>()) {
        if (!j->contains(key) || !(*j)[key].is_string() || (*j)[key].get<std::string>().empty()) {
            issues.push_back(std::string("successful response lacks string field '") + key + "'");
        }
    } else if (!j->contains("error") || !(*j)["error"].is_string()) {
        issues.push_back("failed response lacks string field 'error'");
    }
    return issues;
}

inline Request parse_request(const std::string& line) {
    const auto issues = lint_request(line);
    if (!issues.empty()) throw FormatError("request: " + issues.front());
    const auto j = nlohmann::json::parse(line);
    Request r;
    r.id = j["id"].get<std::int64_t>();
    r.op = j["op"] == "segment" ? Op::segment : Op::predict;
    r.image = j["image"].get<std::string>();
    if (r.op == Op::segment) {
        const auto& b = j["box"];
        const auto narrow = [](const nlohmann::json& v) {
            const auto x = v.get<std::int64_t>();
            if (x > 1 << 30) throw FormatError("request: box coordinate too large");
            return static_cast<int>(x);
        };
        r.box = BoxPrompt{narrow(b[0]), narrow(b[1]), narrow(b[2]), narrow(b[3])};
    }
    return r;
}

/// Parses a response and checks it answers `expected_id`; any defect is a SegmenterIoError.
inline Response parse_response(const std::string& line, Op op, std::int64_t expected_id) {
    const auto issues = lint_response(line, op);
    if (!issues.empty()) throw SegmenterIoError("malformed response: " + issues.front());
    const auto j = nlohmann::json::parse(line);
    Response r;
    r.id = j["id"].get<std::int64_t>();
    if (r.id != expected_id) {
        throw SegmenterIoError("response id " + std::to_string(r.id) + " does not match request id " +
                               std::to_string(expected_id));
    }
    r.ok = j["ok"].get<bool>();
    if (r.ok) {
        r.path = j[op == Op::segment ? "mask" : "probs"].get<std::string>();
    } else {
        r.error = j["error"].get<std::string>();
    }
    return r;
}

}  // namespace srpl::protocol
