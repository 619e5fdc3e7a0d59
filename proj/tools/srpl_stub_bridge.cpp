// Deterministic srpl-seg/1 server for tests and CI. Segments with the oracle
// (Otsu inside the box), predicts with an optional model file, and can be told
// to misbehave in specific ways so the client's failure handling is exercised.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "srpl/model.hpp"
#include "srpl/protocol.hpp"
#include "srpl/segmenter.hpp"
#include "srpl/srt.hpp"

namespace fs = std::filesystem;
using namespace srpl;

namespace {

const std::vector<std::string> kModes = {"none",      "bad-handshake", "silent",  "wrong-id", "truncated",
                                         "garbage",   "crash",         "hang",    "leak",     "wrong-dims",
                                         "reject",    "non-binary",    "missing-file", "oversized"};

void emit(const std::string& line) {
    std::cout << line << '\n' << std::flush;
}

protocol::Response handle(const protocol::Request& req, const fs::path& out_dir, ModelParams* model,
                          const std::string& mode) {
    protocol::Response resp{req.id, true, "", ""};
    const Tensor in = load_srt(req.image);
    const auto out = out_dir / ((req.op == protocol::Op::segment ? "mask_" : "probs_") + std::to_string(req.id) + ".srt");
    if (req.op == protocol::Op::segment) {
        const RgbImage img = rgb_from_tensor(in);
        if (!req.box->valid_for(img.width(), img.height())) return {req.id, false, "", "box out of bounds"};
        LabelMask mask = oracle_segment(img, *req.box);
        Tensor t = to_tensor(mask);
        if (mode == "leak") std::fill(t.u8.begin(), t.u8.end(), std::uint8_t{1});
        if (mode == "non-binary" && !t.u8.empty()) t.u8[0] = 7;
        if (mode == "wrong-dims") {
            t.dims[0] += 1;
            std::vector<std::uint8_t> grown(static_cast<std::size_t>(t.dims[0] * t.dims[1]), 0);
            std::copy(t.u8.begin(), t.u8.end(), grown.begin());
            t.u8 = std::move(grown);
        }
        save_srt(t, out);
    } else {
        RgbImage img = in.dims.size() == 2 || (in.dims.size() == 3 && in.dims[0] == 1)
                           ? RgbImage::replicate(GrayImage(static_cast<int>(in.dims.back()),
                                                           static_cast<int>(in.dims[in.dims.size() - 2]), in.f32))
                           : rgb_from_tensor(in);
        const ModelParams params = model ? *model : ModelParams::zeros();
        save_srt(to_tensor(forward(params, extract_features(img)).q), out);
    }
    if (mode == "oversized") {
        // Header claiming 2^16 x 2^16 followed by a few bytes.
        std::ofstream f(out, std::ios::binary | std::ios::trunc);
        const unsigned char hdr[] = {'S', 'R', 'T', '1', 2, 2, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0};
        f.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    }
    resp.path = mode == "missing-file" ? (out_dir / "does_not_exist.srt").string() : out.string();
    return resp;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"srpl-seg/1 stub bridge"};
    std::string out_dir_arg;
    std::string mode = "none";
    std::string model_path;
    std::string replay_path;
    app.add_option("--out-dir", out_dir_arg, "directory for reply tensors (default: a temp dir)");
    app.add_option("--misbehave", mode, "failure to inject")->check(CLI::IsMember(kModes));
    app.add_option("--model", model_path, "model JSON used for op 'predict' (default: zero weights)");
    app.add_option("--replay", replay_path, "answer each request with the next line of this file, verbatim");
    CLI11_PARSE(app, argc, argv);

    fs::path out_dir = out_dir_arg.empty() ? fs::temp_directory_path() / ("srpl-stub-" + std::to_string(::getpid()))
                                           : fs::path(out_dir_arg);
    std::optional<ModelParams> model;
    try {
        fs::create_directories(out_dir);
        if (!model_path.empty()) model = load_model(model_path);
    } catch (const std::exception& e) {
        emit(nlohmann::json{{"error", e.what()}}.dump());
        return 2;
    }

    std::vector<std::string> replay;
    if (!replay_path.empty()) {
        std::ifstream f(replay_path);
        if (!f) {
            emit(nlohmann::json{{"error", "cannot open " + replay_path}}.dump());
            return 2;
        }
        for (std::string line; std::getline(f, line);) replay.push_back(line);
    }

    if (mode == "silent") {
        std::this_thread::sleep_for(std::chrono::hours(1));
        return 0;
    }
    emit(mode == "bad-handshake" ? R"({"proto":"srpl-seg/0"})" : protocol::handshake_line());

    std::size_t served = 0;
    for (std::string line; std::getline(std::cin, line); ++served) {
        if (!replay_path.empty()) {
            if (served < replay.size()) emit(replay[served]);
            continue;
        }
        if (mode == "crash") return 3;
        if (mode == "hang") {
            std::this_thread::sleep_for(std::chrono::hours(1));
            return 0;
        }
        if (mode == "garbage") {
            emit("this is not json");
            continue;
        }
        std::optional<protocol::Request> req;
        nlohmann::json raw = nlohmann::json::parse(line, nullptr, false);
        const std::int64_t raw_id = raw.is_object() && raw.contains("id") && raw["id"].is_number_integer()
                                        ? raw["id"].get<std::int64_t>()
                                        : 0;
        try {
            req = protocol::parse_request(line);
        } catch (const std::exception& e) {
            emit(protocol::to_json(protocol::Response{raw_id, false, "", e.what()}, protocol::Op::segment).dump());
            continue;
        }
        if (mode == "reject") {
            emit(protocol::to_json(protocol::Response{req->id, false, "", "rejected by request"}, req->op).dump());
            continue;
        }
        protocol::Response resp;
        try {
            resp = handle(*req, out_dir, model ? &*model : nullptr, mode);
        } catch (const std::exception& e) {
            resp = {req->id, false, "", e.what()};
        }
        if (mode == "wrong-id") resp.id += 1000;
        std::string reply = protocol::to_json(resp, req->op).dump();
        if (mode == "truncated") reply = reply.substr(0, reply.size() / 2);
        emit(reply);
    }
    return 0;
}
