#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& scratch() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("mfseg_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Runs the CLI with stderr captured to <scratch>/stderr.txt; returns the exit code.
int mfseg(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " \"" MFSEG_CLI_PATH "\" " + args + " > " + (scratch() / "stdout.txt").string() +
                            " 2> " + (scratch() / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string err() { return slurp(scratch() / "stderr.txt"); }

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string path(const std::string& name) { return (scratch() / name).string(); }

// Built once: small dataset and a tiny training config.
void setup() {
    static bool done = false;
    if (done) return;
    write(scratch() / "spec.json",
          R"({"sequences": 2, "first_seed": 5, "scene": {"frames": 3, "points_per_frame": 600}})");
    write(scratch() / "tiny.json",
          R"({"width": 4, "decoder_hidden": [8, 4, 4, 4, 4], "stage1_epochs": 1, "stage2_epochs": 1,
              "max_frames": 3, "train_queries": 64})");
    REQUIRE(mfseg("gen-data --spec " + path("spec.json") + " --out " + path("data")) == 0);
    done = true;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
    CHECK(mfseg("") == 1);
    CHECK(mfseg("no-such-command") == 1);
    CHECK(mfseg("gen-data") == 1);
    write(scratch() / "bad_spec.json", R"({"sequences": 1, "scene": {"frames": 2, "warp": 9}})");
    CHECK(mfseg("gen-data --spec " + path("bad_spec.json") + " --out " + path("never")) == 1);
    CHECK(err().find("warp") != std::string::npos);
    CHECK(mfseg("props", "MFSEG_SEED=abc") == 1);
}

TEST_CASE("gen-data writes sequences and honors the seed override") {
    setup();
    CHECK(fs::exists(scratch() / "data" / "seq_0000" / "manifest.json"));
    CHECK(fs::exists(scratch() / "data" / "seq_0001" / "frame_0002.bin"));
    CHECK(fs::exists(scratch() / "data" / "dataset_spec.json"));
    REQUIRE(mfseg("gen-data --spec " + path("spec.json") + " --out " + path("seeded_a"), "MFSEG_SEED=77") == 0);
    REQUIRE(mfseg("gen-data --spec " + path("spec.json") + " --out " + path("seeded_b"), "MFSEG_SEED=77") == 0);
    const std::string frame = "seq_0000/frame_0000.bin";
    CHECK(slurp(scratch() / "seeded_a" / frame) == slurp(scratch() / "seeded_b" / frame));
    CHECK(slurp(scratch() / "seeded_a" / frame) != slurp(scratch() / "data" / frame));
}

TEST_CASE("train, eval and bench round trip") {
    setup();
    const std::string tiny = " --config " + path("tiny.json");
    REQUIRE(mfseg("train --data " + path("data") + tiny + " --stage all --out " + path("all.ckpt") + " --log " +
                  path("log.jsonl")) == 0);
    CHECK(fs::exists(path("all.ckpt")));
    CHECK(fs::exists(path("all.ckpt.json")));
    const std::string log = slurp(path("log.jsonl"));
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);  // one epoch per stage

    REQUIRE(mfseg("train --data " + path("data") + tiny + " --stage 1 --out " + path("s1.ckpt")) == 0);
    CHECK(mfseg("train --data " + path("data") + tiny + " --stage 2 --out " + path("s2.ckpt")) == 1);
    REQUIRE(mfseg("train --data " + path("data") + tiny + " --stage 2 --init " + path("s1.ckpt") + " --out " +
                  path("s2.ckpt")) == 0);

    REQUIRE(mfseg("eval --data " + path("data") + " --ckpt " + path("s2.ckpt") + " --report " + path("eval.json")) == 0);
    const auto rep = nlohmann::json::parse(slurp(path("eval.json")));
    CHECK(rep.at("miou").get<double>() >= 0.0);
    CHECK(rep.at("miou").get<double>() <= 1.0);
    CHECK(rep.at("sequences") == 2);

    REQUIRE(mfseg("bench --data " + path("data") + " --ckpt " + path("s2.ckpt") +
                  " --max-frames 3 --repeats 5 --warmups 0 --queries 32 --out " + path("bench.json")) == 0);
    const auto b = nlohmann::json::parse(slurp(path("bench.json")));
    CHECK(b.at("repeats") == 5);
    CHECK(b.at("streaming").size() == 3);
    CHECK(fs::exists(path("bench.csv")));

    REQUIRE(mfseg("bench --data " + path("data") + " --ckpt " + path("missing.ckpt") + tiny +
                  " --max-frames 2 --repeats 5 --warmups 0 --queries 16 --out " + path("fallback")) == 0);
    CHECK(err().find("warning") != std::string::npos);
    CHECK(fs::exists(path("fallback.json")));
    CHECK(mfseg("bench --data " + path("data") + " --repeats 3 --out " + path("x")) == 1);
}

TEST_CASE("data errors exit with 2") {
    setup();
    CHECK(mfseg("eval --data " + path("nowhere") + " --ckpt " + path("all.ckpt")) == 2);
    write(scratch() / "junk.ckpt", "garbage");
    CHECK(mfseg("eval --data " + path("data") + " --ckpt " + path("junk.ckpt")) == 2);
    fs::copy(scratch() / "data", scratch() / "broken", fs::copy_options::recursive);
    std::fstream f(scratch() / "broken" / "seq_0000" / "frame_0001.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(50);
    f.put('\x7f');
    f.close();
    CHECK(mfseg("eval --data " + path("broken") + " --ckpt " + path("all.ckpt")) == 2);
    CHECK(err().find("checksum") != std::string::npos);
    CHECK(mfseg("bench --data " + path("data") + " --max-frames 9 --out " + path("x")) == 2);
}

TEST_CASE("props: pass, and property failures exit with 3") {
    REQUIRE(mfseg("props --out " + path("props.json")) == 0);
    CHECK(nlohmann::json::parse(slurp(path("props.json"))).at("all_pass") == true);
    CHECK(mfseg("props --mutant --out " + path("mutant.json")) == 3);
    CHECK(err().find("FAIL algebra/commutativity") != std::string::npos);
}
