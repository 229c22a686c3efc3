#include "ctl_fixture.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <sys/wait.h>

using namespace parasol;
using parasol::testing::scratch_dir;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result cli(const std::string& args) {
    const std::string cmd = std::string(PARASOL_CLI) + " " + args + " 2>&1";
    Result r;
    std::FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) r.out += buf;
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

/// Writes the tiny config and returns the common CLI prefix for it.
std::string setup(const io::fs::path& dir) {
    io::write_json(dir / "tiny.json", parasol::testing::tiny_config(dir / "runs", 200));
    return "-c " + (dir / "tiny.json").string();
}

io::fs::path only_output(const io::fs::path& runs, const std::string& prefix) {
    io::fs::path found;
    for (const auto& run : io::fs::directory_iterator(runs))
        if (io::fs::exists(run.path() / "outputs"))
            for (const auto& e : io::fs::directory_iterator(run.path() / "outputs"))
                if (e.path().filename().string().starts_with(prefix)) found = e.path();
    return found;
}

}  // namespace

TEST(Cli, PipelineEndToEnd) {
    const auto dir = scratch_dir("cli_pipeline");
    const auto c = setup(dir);
    const auto runs = dir / "runs";

    ASSERT_EQ(cli(c + " gen-corpus").code, 0);
    const auto run_dir = io::fs::directory_iterator(runs)->path();
    const auto first = io::read_bytes(run_dir / "corpus" / "items.f32");
    ASSERT_EQ(cli(c + " gen-corpus").code, 0);
    EXPECT_EQ(io::read_bytes(run_dir / "corpus" / "items.f32"), first);

    ASSERT_EQ(cli(c + " fit-encoders").code, 0);
    const auto mined = cli(c + " mine");
    ASSERT_EQ(mined.code, 0) << mined.out;
    EXPECT_NE(mined.out.find("success_rate"), std::string::npos);

    const auto fd = cli(c + " fd-check --coords 64");
    EXPECT_EQ(fd.code, 0) << fd.out;
    EXPECT_NE(fd.out.find("max relative error"), std::string::npos);

    ASSERT_EQ(cli(c + " train").code, 0);
    EXPECT_NE(cli(c + " train").out.find("already at step 200"), std::string::npos);

    const auto st = cli(c + " stylize --y 120 121 --s 60 61 --lambda 50 --png");
    ASSERT_EQ(st.code, 0) << st.out;
    const auto out = only_output(runs, "stylize-");
    ASSERT_FALSE(out.empty());
    const auto manifest = io::read_json(out / "manifest.json");
    EXPECT_EQ(manifest.at("count"), 2);
    EXPECT_EQ(manifest.at("request").at("lambda"), 50);
    for (const auto& shift : manifest.at("latent_shift")) EXPECT_LT(shift.get<double>(), 1e-9);
    EXPECT_TRUE(io::fs::exists(out / "item_001.png"));
    EXPECT_EQ(ctl::read_items(out).rows(), 2);

    EXPECT_EQ(cli(c + " sample --style 60 --content 120 -n 3").code, 0);
    EXPECT_EQ(ctl::read_items(only_output(runs, "sample-")).rows(), 3);
    EXPECT_EQ(cli(c + " interpolate --from 60 --to 61 --content 120").code, 0);
    EXPECT_EQ(ctl::read_items(only_output(runs, "interpolate-")).rows(), 5);
    EXPECT_EQ(cli(c + " diversify --content 120 --style 60 -n 2").code, 0);
    EXPECT_EQ(ctl::read_items(only_output(runs, "diversify-")).rows(), 2);

    const auto ev = cli(c + " eval --pairs 5");
    ASSERT_EQ(ev.code, 0) << ev.out;
    bool report = false;
    for (const auto& e : io::fs::recursive_directory_iterator(runs))
        if (e.path().filename() == "report.json") {
            report = true;
            EXPECT_EQ(io::read_json(e.path()).at("rows").size(), 5u);
        }
    EXPECT_TRUE(report);
}

TEST(Cli, ErrorsExitWithOne) {
    const auto dir = scratch_dir("cli_errors");
    const auto c = setup(dir);
    const auto missing = cli(c + " train");
    EXPECT_EQ(missing.code, 1);
    EXPECT_NE(missing.out.find("parasol gen-corpus"), std::string::npos) << missing.out;
    EXPECT_EQ(cli(c + " no-such-command").code, 1);
    EXPECT_EQ(cli(c + " --set train.bogus=1 gen-corpus").code, 1);
    EXPECT_EQ(cli(c + " --set train.steps=many gen-corpus").code, 1);
    EXPECT_EQ(cli("").code, 1);
    EXPECT_EQ(cli("-c /no/such/file.json gen-corpus").code, 1);
    ASSERT_EQ(cli(c + " gen-corpus").code, 0);
    EXPECT_EQ(cli(c + " stylize --y 1 --s 2").code, 1);
}
