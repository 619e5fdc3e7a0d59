#pragma once

// Client side of srpl-seg/1: a bridge process driven over pipes, exposed as a
// Segmenter and as a SourceModel.

#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "srpl/error.hpp"
#include "srpl/model.hpp"
#include "srpl/protocol.hpp"
#include "srpl/segmenter.hpp"
#include "srpl/srt.hpp"
#include "srpl/subprocess.hpp"

namespace srpl {

inline constexpr const char* kSegmenterCmdEnv = "SRPL_SEGMENTER_CMD";

struct BridgeConfig {
    std::string command;                        // run through /bin/sh -c
    std::filesystem::path cwd;                  // empty = inherit
    std::chrono::milliseconds timeout{120000};  // per reply, handshake included
    std::filesystem::path scratch_dir;          // request tensors; empty = a fresh temp dir

    /// SRPL_SEGMENTER_CMD, when set and non-empty, replaces `command`.
    BridgeConfig with_env_override() const {
        BridgeConfig c = *this;
        if (const char* env = std::getenv(kSegmenterCmdEnv); env && *env) c.command = env;
        return c;
    }
};

/// One bridge process, one request in flight. After any transport or protocol
/// failure the process is discarded and the next call starts a fresh one.
class Bridge {
public:
    explicit Bridge(BridgeConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.command.empty()) throw ConfigError("external segmenter: empty command");
        if (cfg_.timeout.count() <= 0) throw ConfigError("external segmenter: timeout must be positive");
        if (cfg_.scratch_dir.empty()) {
            static std::atomic<unsigned> counter{0};
            cfg_.scratch_dir = std::filesystem::temp_directory_path() /
                               ("srpl-bridge-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
            owns_scratch_ = true;
        }
        std::filesystem::create_directories(cfg_.scratch_dir);
    }

    ~Bridge() {
        proc_.reset();
        if (owns_scratch_) {
            std::error_code ec;
            std::filesystem::remove_all(cfg_.scratch_dir, ec);
        }
    }

    Bridge(const Bridge&) = delete;
    Bridge& operator=(const Bridge&) = delete;

    const BridgeConfig& config() const { return cfg_; }
    std::uint64_t restarts() const { return starts_ > 0 ? starts_ - 1 : 0; }

    /// Sends `input` with op and optional box; returns the tensor the bridge
    /// names in a successful reply. An ok:false reply raises SegmenterIoError
    /// carrying the bridge's message but keeps the process.
    Tensor call(protocol::Op op, const Tensor& input, const std::optional<BoxPrompt>& box) {
        std::lock_guard lock(mu_);
        const std::int64_t id = next_id_++;
        const auto image_path = cfg_.scratch_dir / ("req_" + std::to_string(id) + ".srt");
        save_srt(input, image_path);
        struct Cleanup {
            std::filesystem::path p;
            ~Cleanup() {
                std::error_code ec;
                std::filesystem::remove(p, ec);
            }
        } cleanup{image_path};

        protocol::Response resp;
        try {
            ensure_started();
            proc_->write_line(protocol::to_json(protocol::Request{id, op, image_path.string(), box}).dump());
            auto line = proc_->read_line(cfg_.timeout);
            if (!line) throw SegmenterIoError("bridge exited before replying to request " + std::to_string(id));
            resp = protocol::parse_response(*line, op, id);
        } catch (const SegmenterIoError&) {
            proc_.reset();
            throw;
        }
        if (!resp.ok) throw SegmenterIoError("bridge rejected request " + std::to_string(id) + ": " + resp.error);

        std::filesystem::path out = resp.path;
        if (out.is_relative() && !cfg_.cwd.empty()) out = cfg_.cwd / out;
        try {
            return load_srt(out);
        } catch (const Error& e) {
            throw SegmenterIoError(std::string("bridge reply tensor unreadable: ") + e.what());
        }
    }

private:
    void ensure_started() {
        if (proc_) return;
        ++starts_;
        proc_ = std::make_unique<Subprocess>(Subprocess::shell(cfg_.command, cfg_.cwd));
        auto line = proc_->read_line(cfg_.timeout);
        if (!line) throw SegmenterIoError("bridge exited before its handshake: " + cfg_.command);
        const auto issues = protocol::lint_handshake(*line);
        if (!issues.empty()) throw SegmenterIoError("bad bridge handshake: " + issues.front());
    }

    BridgeConfig cfg_;
    bool owns_scratch_ = false;
    std::unique_ptr<Subprocess> proc_;
    std::mutex mu_;
    std::int64_t next_id_ = 1;
    std::uint64_t starts_ = 0;
};

class ExternalSegmenter final : public Segmenter {
public:
    explicit ExternalSegmenter(BridgeConfig cfg) : bridge_(std::make_shared<Bridge>(std::move(cfg))) {}
    explicit ExternalSegmenter(std::shared_ptr<Bridge> bridge) : bridge_(std::move(bridge)) {}

    LabelMask segment(const RgbImage& img, const BoxPrompt& box) override {
        const Tensor t = bridge_->call(protocol::Op::segment, to_tensor(img), box);
        if (t.dtype != DType::u8 || t.dims.size() != 2 || t.dims[0] != static_cast<std::uint32_t>(img.height()) ||
            t.dims[1] != static_cast<std::uint32_t>(img.width())) {
            throw SegmenterIoError("bridge mask is not a (" + std::to_string(img.height()) + "," +
                                   std::to_string(img.width()) + ") u8 tensor");
        }
        for (auto v : t.u8) {
            if (v > 1) throw SegmenterIoError("bridge mask is not binary");
        }
        return mask_from_tensor(t, 2);
    }

    std::string name() const override { return "external"; }
    Bridge& bridge() { return *bridge_; }

private:
    std::shared_ptr<Bridge> bridge_;
};

/// A source model served by a bridge through op "predict".
class ExternalSourceModel final : public SourceModel {
public:
    ExternalSourceModel(BridgeConfig cfg, int num_classes)
        : bridge_(std::make_shared<Bridge>(std::move(cfg))), num_classes_(num_classes) {
        if (num_classes < 2) throw InvalidArgument("ExternalSourceModel: need at least 2 classes");
    }

    int num_classes() const override { return num_classes_; }

    ProbMap predict(const RgbImage& img) override {
        const Tensor t = bridge_->call(protocol::Op::predict, to_tensor(img), std::nullopt);
        if (t.dtype != DType::f32 || t.dims.size() != 3 || t.dims[0] != static_cast<std::uint32_t>(num_classes_) ||
            t.dims[1] != static_cast<std::uint32_t>(img.height()) || t.dims[2] != static_cast<std::uint32_t>(img.width())) {
            throw SegmenterIoError("bridge probabilities are not a (" + std::to_string(num_classes_) + "," +
                                   std::to_string(img.height()) + "," + std::to_string(img.width()) + ") f32 tensor");
        }
        try {
            return probmap_from_tensor(t);
        } catch (const Error& e) {
            throw SegmenterIoError(std::string("bridge probabilities invalid: ") + e.what());
        }
    }

private:
    std::shared_ptr<Bridge> bridge_;
    int num_classes_;
};

}  // namespace srpl
