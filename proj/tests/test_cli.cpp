// Integration tests for the command-line binary. The executable is spawned
// as a real subprocess (path injected by the build as VDRL_CLI_PATH) so flag
// parsing, exit codes, error formatting, and artifact round-trips are all
// exercised through the same surface a user sees.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path scratch_root = fs::temp_directory_path() / "vdrl_cli_tests";

fs::path fresh_dir(const std::string& name) {
    fs::path dir = scratch_root / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args, const fs::path& stderr_file = {}) {
    std::string cmd = std::string(VDRL_CLI_PATH) + " " + args + " >/dev/null 2>";
    cmd += stderr_file.empty() ? std::string("/dev/null") : stderr_file.string();
    int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void spit(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    REQUIRE(os.good());
    os << text;
}

nlohmann::json read_json(const fs::path& path) { return nlohmann::json::parse(slurp(path)); }

// settings small enough that every pipeline stage finishes in seconds
const char* tiny_config =
    "slowae.window = 256\n"
    "slowae.channels = 3\n"
    "slowae.enc_width = 8\n"
    "slowae.enc_blocks = 1\n"
    "slowae.cond_width = 6\n"
    "slowae.cond_blocks = 1\n"
    "slowae.dec_width = 8\n"
    "slowae.dec_blocks = 3\n"
    "slowae.skip_width = 8\n"
    "slowae.head_width = 12\n"
    "slowae.batch = 2\n"
    "slowae.log_every = 2\n"
    "controller.target_rate_hz = 60\n"
    "rlt.k = 7\n"
    "rlt.max_run_length = 256\n"
    "rlt.channels = 3\n"
    "rlt.num_classes = 4\n"
    "rlt.width = 16\n"
    "rlt.layers = 1\n"
    "rlt.heads = 2\n"
    "rlt.ffn = 32\n"
    "rlt.window = 24\n"
    "rlt.rel_clip = 8\n"
    "rlt.max_positions = 24\n"
    "rlt.batch = 2\n"
    "rlt.log_every = 2\n"
    "data.classes = 2\n"
    "data.per_class = 2\n"
    "data.duration_s = 0.5\n";

}  // namespace

TEST_CASE("cli rejects bad invocations with distinct exit codes") {
    fs::path dir = fresh_dir("errors");

    REQUIRE(run_cli("--help") == 0);
    REQUIRE(run_cli("") == 2);                      // missing subcommand
    REQUIRE(run_cli("encode --nope x") == 2);       // unknown flag
    REQUIRE(run_cli("encode") == 2);                // missing required option
    REQUIRE(run_cli("no-such-command") == 2);

    fs::path broken = dir / "broken.cfg";
    spit(broken, "data.classes 2\n");  // missing '='
    REQUIRE(run_cli("gen-data --config " + broken.string() + " --out " + dir.string()) == 3);

    fs::path invalid = dir / "invalid.cfg";
    spit(invalid, "data.classes = 99\n");
    REQUIRE(run_cli("gen-data --config " + invalid.string() + " --out " + dir.string()) == 3);

    REQUIRE(run_cli("encode --input " + (dir / "missing.csv").string()) == 3);

    fs::path junk_events = dir / "junk.vdrl";
    spit(junk_events, "JUNKJUNKJUNK");
    REQUIRE(run_cli("decode --input " + junk_events.string()) == 3);

    fs::path junk_ckpt = dir / "junk.ckpt";
    spit(junk_ckpt, "XXXXXXXXXXXX");
    REQUIRE(run_cli("sample --ckpt " + junk_ckpt.string()) == 3);

    fs::path future_ckpt = dir / "future.ckpt";
    spit(future_ckpt, std::string("VDCK") + '\x07' + std::string(64, '\0'));
    fs::path errtxt = dir / "stderr.txt";
    REQUIRE(run_cli("sample --ckpt " + future_ckpt.string(), errtxt) == 4);

    // diagnostics are a single machine-parsable line on stderr
    std::string message = slurp(errtxt);
    REQUIRE(message.rfind("error: version:", 0) == 0);
    REQUIRE(std::count(message.begin(), message.end(), '\n') == 1);
    REQUIRE(message.back() == '\n');
}

TEST_CASE("cli encode and decode invert each other on a dense grid") {
    fs::path dir = fresh_dir("roundtrip");

    // hand-rolled three-channel grid in the same CSV dialect the binary emits
    std::ostringstream grid;
    grid << "c0,c1,c2\n";
    const std::vector<int> runs0 = {0, 0, 0, 2, 2, -1, -1, -1, -1, 7, 7, -7};
    for (std::size_t t = 0; t < 48; ++t) {
        int a = runs0[t % runs0.size()];
        int b = t < 20 ? 1 : -3;
        int c = static_cast<int>(t / 16) - 1;
        grid << a << ',' << b << ',' << c << '\n';
    }
    fs::path grid_csv = dir / "grid.csv";
    spit(grid_csv, grid.str());

    fs::path enc = dir / "enc", dec = dir / "dec";
    REQUIRE(run_cli("encode --input " + grid_csv.string() + " --k 7 --rate 250 --out " +
                    enc.string()) == 0);
    REQUIRE(fs::exists(enc / "grid.vdrl"));
    REQUIRE(run_cli("decode --input " + (enc / "grid.vdrl").string() + " --out " +
                    dec.string()) == 0);
    REQUIRE(slurp(dec / "grid.csv") == grid.str());

    // values outside the quantiser range must be rejected, not truncated
    spit(grid_csv, "c0\n9\n");
    REQUIRE(run_cli("encode --input " + grid_csv.string() + " --k 7 --out " + enc.string()) != 0);
}

TEST_CASE("cli gen-data is byte-identical across reruns of the same seed") {
    fs::path dir = fresh_dir("determinism");
    fs::path cfg = dir / "tiny.cfg";
    spit(cfg, tiny_config);

    fs::path a = dir / "a", b = dir / "b";
    for (const fs::path& out : {a, b})
        REQUIRE(run_cli("gen-data --seed 7 --config " + cfg.string() + " --out " +
                        out.string()) == 0);

    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
        const fs::path name = entry.path().filename();
        REQUIRE(slurp(a / name) == slurp(b / name));
        ++files;
    }
    REQUIRE(files == 5);  // 4 clips + manifest
}

TEST_CASE("cli pipeline artifacts chain end to end") {
    fs::path dir = fresh_dir("pipeline");
    fs::path cfg = dir / "tiny.cfg";
    spit(cfg, tiny_config);
    const std::string with_cfg = " --config " + cfg.string();

    fs::path corpus = dir / "corpus";
    REQUIRE(run_cli("gen-data --seed 3" + with_cfg + " --out " + corpus.string()) == 0);

    // the generated corpus feeds training through --data
    fs::path sae = dir / "sae";
    REQUIRE(run_cli("train-slowae --seed 3 --steps 4 --data " + corpus.string() + with_cfg +
                    " --out " + sae.string()) == 0);
    REQUIRE(fs::exists(sae / "slowae.ckpt"));
    REQUIRE(fs::exists(sae / "train_log.csv"));
    REQUIRE(read_json(sae / "report.json")["kind"] == "slowae");

    fs::path events = dir / "events";
    REQUIRE(run_cli("extract-events --seed 3 --ckpt " + (sae / "slowae.ckpt").string() +
                    with_cfg + " --out " + events.string()) == 0);
    nlohmann::json manifest = read_json(events / "manifest.json");
    REQUIRE(manifest["clips"].size() == 4);
    REQUIRE(manifest["k"] == 7);
    for (const auto& row : manifest["clips"])
        REQUIRE(fs::exists(events / row["file"].get<std::string>()));

    // two identical training runs must produce identical checkpoints and logs
    fs::path rlt = dir / "rlt", rlt2 = dir / "rlt2";
    for (const fs::path& out : {rlt, rlt2})
        REQUIRE(run_cli("train-rlt --seed 5 --steps 3 --events " + events.string() + with_cfg +
                        " --out " + out.string()) == 0);
    for (const char* name : {"rlt.ckpt", "train_log.csv", "report.json"})
        REQUIRE(slurp(rlt / name) == slurp(rlt2 / name));

    fs::path smp = dir / "smp", smp2 = dir / "smp2";
    for (const fs::path& out : {smp, smp2})
        REQUIRE(run_cli("sample --seed 9 --num-events 12 --ckpt " + (rlt / "rlt.ckpt").string() +
                        " --out " + out.string()) == 0);
    REQUIRE(slurp(smp / "sample.vdrl") == slurp(smp2 / "sample.vdrl"));

    // sampled events decode to a dense grid with one column per channel
    fs::path smpd = dir / "smpd";
    REQUIRE(run_cli("decode --input " + (smp / "sample.vdrl").string() + " --out " +
                    smpd.string()) == 0);
    REQUIRE(slurp(smpd / "sample.csv").rfind("c0,c1,c2\n", 0) == 0);

    // checkpoints of the wrong kind are rejected up front
    REQUIRE(run_cli("sample --ckpt " + (sae / "slowae.ckpt").string()) == 3);
    REQUIRE(run_cli("extract-events --ckpt " + (rlt / "rlt.ckpt").string() + with_cfg +
                    " --out " + dir.string()) == 3);

    fs::path evr = dir / "evr";
    REQUIRE(run_cli("eval --events " + events.string() + " --out " + evr.string()) == 0);
    nlohmann::json report = read_json(evr / "report.json");
    REQUIRE(report["clips"] == 4);
    REQUIRE(report["pearson"].get<double>() >= -1.0);
    REQUIRE(report["pearson"].get<double>() <= 1.0);
    REQUIRE(report["spearman"].get<double>() >= -1.0);
    REQUIRE(report["spearman"].get<double>() <= 1.0);
    REQUIRE(report["bit_rates"]["pcm_16bit_24khz"] == 384000);
    REQUIRE(report["bit_rates"]["pcm_8bit_24khz"] == 192000);
    REQUIRE(report["events_per_second"].get<double>() > 0.0);
    REQUIRE(slurp(evr / "clips.csv").rfind("clip,class_id,events,change_points,aer\n", 0) == 0);
}
