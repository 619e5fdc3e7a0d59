#include <gtest/gtest.h>

#include <cstdlib>

#include "criteria.hpp"

using namespace srpl;
namespace cr = srpl::criteria;
using std::chrono::milliseconds;

namespace {

std::string stub_cmd(const std::string& extra = "") {
    return cr::shell_quote(cr::stub_path().string()) + (extra.empty() ? "" : " " + extra);
}

RgbImage fixture_image() { return rgb_from_tensor(load_srt(cr::protocol_fixtures() / "rect_image.srt")); }

}  // namespace

TEST(Protocol, FixturesFollowTheGrammar) {
    const auto o = cr::check_fixture_grammar();
    EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Protocol, StubReproducesRecordedResponses) {
    const auto o = cr::check_stub_against_fixtures();
    EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Protocol, ClientReadsRecordedResponses) {
    const auto o = cr::check_client_against_fixtures();
    EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Protocol, ClientSurvivesMisbehavingServers) {
    const auto o = cr::check_client_against_misbehaving_servers();
    EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Protocol, ParsersSurviveMutations) {
    const auto o = cr::check_parser_mutation_fuzz();
    EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Protocol, RequestJsonRoundTrip) {
    const protocol::Request r{42, protocol::Op::segment, "a b/c.srt", BoxPrompt{1, 2, 3, 4}};
    const std::string line = protocol::to_json(r).dump();
    EXPECT_EQ(line, R"({"box":[1,2,3,4],"id":42,"image":"a b/c.srt","op":"segment"})");
    const auto back = protocol::parse_request(line);
    EXPECT_EQ(back.id, 42);
    EXPECT_EQ(back.image, r.image);
    EXPECT_EQ(back.box, r.box);
    const protocol::Request p{7, protocol::Op::predict, "x.srt", std::nullopt};
    EXPECT_EQ(protocol::to_json(p).dump(), R"({"id":7,"image":"x.srt","op":"predict"})");
}

TEST(Protocol, ResponseIdMustMatch) {
    const std::string line = R"({"id":3,"mask":"m.srt","ok":true})";
    EXPECT_EQ(protocol::parse_response(line, protocol::Op::segment, 3).path, "m.srt");
    EXPECT_THROW(protocol::parse_response(line, protocol::Op::segment, 4), SegmenterIoError);
    EXPECT_THROW(protocol::parse_response(line, protocol::Op::predict, 3), SegmenterIoError);
    const auto err = protocol::parse_response(R"({"error":"nope","id":1,"ok":false})", protocol::Op::predict, 1);
    EXPECT_FALSE(err.ok);
    EXPECT_EQ(err.error, "nope");
}

TEST(Subprocess, EchoesLinesAndReportsEof) {
    Subprocess p({"/bin/sh", "-c", "read a; echo got:$a; read b; printf tail"});
    p.write_line("one");
    EXPECT_EQ(p.read_line(milliseconds(2000)), "got:one");
    p.write_line("two");
    EXPECT_EQ(p.read_line(milliseconds(2000)), "tail");
    EXPECT_EQ(p.read_line(milliseconds(2000)), std::nullopt);
}

TEST(Subprocess, TimesOutOnSilence) {
    Subprocess p({"/bin/sh", "-c", "sleep 30"});
    EXPECT_THROW(p.read_line(milliseconds(100)), SegmenterTimeout);
    p.terminate(milliseconds(50));
}

TEST(Subprocess, WriteToExitedChildIsAnError) {
    Subprocess p({"/bin/sh", "-c", "exit 0"});
    EXPECT_EQ(p.read_line(milliseconds(2000)), std::nullopt);
    EXPECT_THROW(
        {
            for (int i = 0; i < 64; ++i) p.write_line(std::string(4096, 'x'));
        },
        SegmenterIoError);
}

TEST(Subprocess, ShellRunsInCwd) {
    cr::TempDir dir("cwd");
    auto p = Subprocess::shell("pwd", dir.path());
    EXPECT_EQ(std::filesystem::path(*p.read_line(milliseconds(2000))), std::filesystem::canonical(dir.path()));
}

TEST(Bridge, RestartsAfterStartupFailure) {
    cr::TempDir dir("restart");
    BridgeConfig cfg;
    cfg.command = "if [ -e marker ]; then exec " + stub_cmd() + "; else touch marker; exit 1; fi";
    cfg.cwd = dir.path();
    cfg.timeout = milliseconds(5000);
    auto bridge = std::make_shared<Bridge>(cfg);
    SegmenterHandle handle(std::make_unique<ExternalSegmenter>(bridge));
    const RgbImage img = fixture_image();
    EXPECT_THROW(segment_with_prompt(handle, img, {2, 1, 13, 14}), SegmenterIoError);
    const LabelMask m = segment_with_prompt(handle, img, {2, 1, 13, 14});
    EXPECT_EQ(m, oracle_segment(img, {2, 1, 13, 14}));
    EXPECT_EQ(bridge->restarts(), 1u);
}

TEST(Bridge, RejectionKeepsTheProcess) {
    BridgeConfig cfg;
    cfg.command = stub_cmd("--misbehave reject");
    cfg.timeout = milliseconds(5000);
    auto bridge = std::make_shared<Bridge>(cfg);
    ExternalSegmenter seg(bridge);
    const RgbImage img = fixture_image();
    for (int i = 0; i < 2; ++i) {
        try {
            seg.segment(img, {2, 1, 13, 14});
            FAIL() << "expected a rejection";
        } catch (const SegmenterIoError& e) {
            EXPECT_NE(std::string(e.what()).find("rejected by request"), std::string::npos);
        }
    }
    EXPECT_EQ(bridge->restarts(), 0u);
}

TEST(Bridge, ExternalModelMatchesBuiltin) {
    cr::TempDir dir("model");
    ModelParams p = ModelParams::zeros();
    p.w(1, 0) = 9.0;
    p.w(1, 7) = -1.5;
    save_model(p, dir.path() / "m.json");
    BridgeConfig cfg;
    cfg.command = stub_cmd("--model " + cr::shell_quote((dir.path() / "m.json").string()));
    cfg.timeout = milliseconds(5000);
    ExternalSourceModel ext(cfg, 2);
    BuiltinSourceModel builtin(p);
    std::mt19937_64 rng(3);
    const GrayImage g = cr::random_image(rng, 11, 7);
    const ProbMap a = predict_prob(ext, g);
    const ProbMap b = predict_prob(builtin, g);
    ASSERT_EQ(a.data().size(), b.data().size());
    for (std::size_t i = 0; i < a.data().size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
    ExternalSourceModel three(cfg, 3);
    EXPECT_THROW(predict_prob(three, g), SegmenterIoError);
}

TEST(Bridge, EnvironmentOverridesCommand) {
    BridgeConfig cfg;
    cfg.command = "original";
    ::setenv(kSegmenterCmdEnv, "replacement --flag", 1);
    EXPECT_EQ(cfg.with_env_override().command, "replacement --flag");
    ::setenv(kSegmenterCmdEnv, "", 1);
    EXPECT_EQ(cfg.with_env_override().command, "original");
    ::unsetenv(kSegmenterCmdEnv);
    EXPECT_EQ(cfg.with_env_override().command, "original");
}

TEST(Bridge, RejectsBadConfig) {
    EXPECT_THROW(Bridge(BridgeConfig{}), ConfigError);
    BridgeConfig cfg;
    cfg.command = "true";
    cfg.timeout = milliseconds(0);
    EXPECT_THROW(Bridge{cfg}, ConfigError);
}
