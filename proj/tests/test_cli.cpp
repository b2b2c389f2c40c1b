// End-to-end tests of the command-line binary: exit codes, output files,
// byte-stability across reruns and thread counts, and error reporting.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#ifndef POISMIX_CLI_PATH
#error "POISMIX_CLI_PATH must point at the built binary"
#endif

namespace {

const std::string cli = POISMIX_CLI_PATH;

std::string& work_dir() {
  static std::string dir = [] {
    char tmpl[] = "/tmp/poismix_cli_XXXXXX";
    char* d = mkdtemp(tmpl);
    REQUIRE(d != nullptr);
    return std::string(d);
  }();
  return dir;
}

struct run_result {
  int exit_code;
  std::string out;
  std::string err;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.good());
  out << content;
}

run_result run(const std::string& args, const std::string& env = "") {
  const std::string out_path = work_dir() + "/stdout.txt";
  const std::string err_path = work_dir() + "/stderr.txt";
  const std::string cmd =
      env + (env.empty() ? "" : " ") + cli + " " + args + " >" + out_path + " 2>" + err_path;
  const int status = std::system(cmd.c_str());
  run_result r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  return r;
}

const char* k_counts =
    "gene\tsubject\tgroup\tcount\tread_depth\n"
    "g1\ts1\ta\t2\t1\n"
    "g1\ts1\ta\t4\t1\n"
    "g1\ts1\ta\t3\t1\n"
    "g1\ts2\ta\t3\t1\n"
    "g1\ts2\ta\t5\t1\n"
    "g1\ts2\ta\t4\t1\n"
    "g1\ts3\tb\t9\t1\n"
    "g1\ts3\tb\t11\t1\n"
    "g1\ts3\tb\t10\t1\n"
    "g1\ts4\tb\t8\t1\n"
    "g1\ts4\tb\t12\t1\n"
    "g1\ts4\tb\t10\t1\n"
    "g2\ts1\ta\t5\t1\n"
    "g2\ts1\ta\t6\t1\n"
    "g2\ts1\ta\t5\t1\n"
    "g2\ts2\ta\t6\t1\n"
    "g2\ts2\ta\t5\t1\n"
    "g2\ts2\ta\t7\t1\n"
    "g2\ts3\tb\t5\t1\n"
    "g2\ts3\tb\t7\t1\n"
    "g2\ts3\tb\t6\t1\n"
    "g2\ts4\tb\t6\t1\n"
    "g2\ts4\tb\t5\t1\n"
    "g2\ts4\tb\t6\t1\n";

}  // namespace

TEST_CASE("help and argument errors") {
  CHECK(run("--help").exit_code == 0);
  CHECK(run("").exit_code != 0);
  CHECK(run("frobnicate").exit_code != 0);
  const auto bad = run("test");  // missing required counts path
  CHECK(bad.exit_code != 0);
  const auto bad_smoothed = run("w1 nofile.tsv --smoothed sideways");
  CHECK(bad_smoothed.exit_code != 0);
}

TEST_CASE("simulate runs green and is byte-stable") {
  const std::string p1 = work_dir() + "/sim1";
  const std::string p2 = work_dir() + "/sim2";
  const std::string args = " A 1a --rounds 2 --n-perm 19 --cells 10 --seed 3 --out ";
  const auto r1 = run("simulate" + args + p1);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.out.find("wrote " + p1 + ".csv") != std::string::npos);
  const auto r2 = run("simulate" + args + p2);
  REQUIRE(r2.exit_code == 0);

  const std::string csv = read_file(p1 + ".csv");
  CHECK(csv == read_file(p2 + ".csv"));
  CHECK(read_file(p1 + ".json") == read_file(p2 + ".json"));
  CHECK(csv.find("design,model,cells_per_subject,rounds,n_perm,alpha,seed,") == 0);

  const auto j = nlohmann::json::parse(read_file(p1 + ".json"));
  CHECK(j["command"] == "simulate");
  CHECK(j["design"] == "A");
  CHECK(j["model"] == "1a");
  CHECK(j["rounds"] == 2);
  CHECK(j["valid"].is_boolean());
  CHECK_FALSE(j.contains("wall_time"));

  SECTION("a different seed changes the report") {
    const std::string p3 = work_dir() + "/sim3";
    const auto r3 = run("simulate A 1a --rounds 2 --n-perm 19 --cells 10 --seed 4 --out " + p3);
    REQUIRE(r3.exit_code == 0);
    // Same shape, different draws; the JSON must differ at least in the seed.
    CHECK(read_file(p3 + ".json") != read_file(p1 + ".json"));
  }
}

TEST_CASE("simulate rejects bad requests with helpful messages") {
  const auto bad_design = run("simulate D 1a --rounds 1 --out " + work_dir() + "/x");
  CHECK(bad_design.exit_code == 1);
  CHECK(bad_design.err.find("A, B, or C") != std::string::npos);

  const auto bad_model = run("simulate A 9z --rounds 1 --out " + work_dir() + "/x");
  CHECK(bad_model.exit_code == 1);
  CHECK(bad_model.err.find("1a..4c") != std::string::npos);

  const auto bad_rounds = run("simulate A 1a --rounds 0 --out " + work_dir() + "/x");
  CHECK(bad_rounds.exit_code == 1);
  CHECK(bad_rounds.err.find("rounds") != std::string::npos);
}

TEST_CASE("test command: two genes, BH-corrected, byte-stable") {
  const std::string counts = work_dir() + "/counts.tsv";
  write_file(counts, k_counts);
  const std::string p1 = work_dir() + "/t1";
  const std::string p2 = work_dir() + "/t2";
  const std::string args = counts + " --n-perm 99 --seed 4 --out ";

  const auto r1 = run("test " + args + p1);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.out.find("tested 2 gene(s), 0 failed") != std::string::npos);
  const auto r2 = run("test " + args + p2);
  REQUIRE(r2.exit_code == 0);

  const std::string csv = read_file(p1 + ".csv");
  CHECK(csv == read_file(p2 + ".csv"));
  CHECK(read_file(p1 + ".json") == read_file(p2 + ".json"));
  CHECK(csv.find("gene,variant,statistic,p_value,q_value,converged_fraction,B_used,error\n") ==
        0);
  CHECK(csv.find("g1,mixing,") != std::string::npos);
  CHECK(csv.find("g1,mixture,") != std::string::npos);
  CHECK(csv.find("g2,mixing,") != std::string::npos);

  const auto j = nlohmann::json::parse(read_file(p1 + ".json"));
  REQUIRE(j["genes"].size() == 2);
  CHECK(j["config"]["n_perm"] == 99);
  CHECK(j["config"]["seed"] == 4);
  for (const auto& g : j["genes"]) {
    CHECK(g["error"].is_null());
    for (const auto& v : g["variants"]) {
      const double p = v["p_value"].get<double>();
      CHECK(p > 0.0);
      CHECK(p <= 1.0);
      const double q = v["q_value"].get<double>();
      CHECK(q >= p - 1e-15);
    }
  }

  SECTION("--smoothed restricts the variants") {
    const std::string p3 = work_dir() + "/t3";
    const auto r3 = run("test " + args + p3 + " --smoothed mixing");
    REQUIRE(r3.exit_code == 0);
    const std::string c3 = read_file(p3 + ".csv");
    CHECK(c3.find(",mixing,") != std::string::npos);
    CHECK(c3.find(",mixture,") == std::string::npos);
  }

  SECTION("thread count does not change the bytes") {
    const std::string p4 = work_dir() + "/t4";
    const auto r4 = run("test " + args + p4 + " --threads 4");
    REQUIRE(r4.exit_code == 0);
    CHECK(read_file(p4 + ".csv") == csv);

    const std::string p5 = work_dir() + "/t5";
    const auto r5 = run("test " + args + p5 + " --threads 1", "POISMIX_THREADS=4");
    REQUIRE(r5.exit_code == 0);
    CHECK(read_file(p5 + ".csv") == csv);
  }

  SECTION("a bad POISMIX_THREADS value is a config error") {
    const auto r6 = run("test " + args + work_dir() + "/t6", "POISMIX_THREADS=many");
    CHECK(r6.exit_code == 1);
    CHECK(r6.err.find("POISMIX_THREADS") != std::string::npos);
  }
}

TEST_CASE("test command with covariates") {
  const std::string counts = work_dir() + "/cov_counts.tsv";
  std::ostringstream text;
  text << "gene\tsubject\tgroup\tcount\tread_depth\n";
  for (int s = 0; s < 10; ++s) {
    const int base = (s < 5 ? 3 : 9) + (s % 3);
    for (int c = 0; c < 5; ++c)
      text << "g\ts" << char('a' + s) << '\t' << (s < 5 ? "x" : "y") << '\t'
           << (base + (c % 2)) << "\t1\n";
  }
  write_file(counts, text.str());

  const std::string cov = work_dir() + "/cov.csv";
  std::ostringstream ctext;
  ctext << "subject,age,dx\n";
  for (int s = 0; s < 10; ++s)
    ctext << 's' << char('a' + s) << ',' << 30 + 3 * s << ',' << (s < 5 ? 0 : 1) << '\n';
  write_file(cov, ctext.str());

  const std::string p = work_dir() + "/covt";
  const auto r = run("test " + counts + " --n-perm 99 --seed 7 --covariates " + cov +
                     " --diagnosis-col dx --smoothed mixing --out " + p);
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(read_file(p + ".json"));
  REQUIRE(j["genes"].size() == 1);
  const auto& v = j["genes"][0]["variants"][0];
  CHECK(v.contains("gower"));
  CHECK(v["gower"]["min_eigenvalue"].get<double>() >= -1e-8);
  CHECK(v["p_value"].get<double>() > 0.0);

  SECTION("omitting --diagnosis-col is a config error") {
    const auto bad = run("test " + counts + " --covariates " + cov + " --out " + p);
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.find("diagnosis") != std::string::npos);
  }

  SECTION("an unknown diagnosis column is a config error") {
    const auto bad = run("test " + counts + " --covariates " + cov +
                         " --diagnosis-col nope --out " + p);
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.find("nope") != std::string::npos);
  }
}

TEST_CASE("per-gene failures do not fail the process") {
  const std::string counts = work_dir() + "/solo.tsv";
  write_file(counts,
             "gene\tsubject\tgroup\tcount\tread_depth\n"
             "good\ts1\ta\t2\t1\n"
             "good\ts2\ta\t3\t1\n"
             "good\ts3\tb\t9\t1\n"
             "good\ts4\tb\t8\t1\n"
             "solo\ts1\tonly\t4\t1\n"
             "solo\ts2\tonly\t5\t1\n");
  const std::string p = work_dir() + "/solo_out";
  const auto r = run("test " + counts + " --n-perm 9 --seed 1 --out " + p);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("tested 2 gene(s), 1 failed") != std::string::npos);
  const std::string csv = read_file(p + ".csv");
  CHECK(csv.find("solo,mixing,,,,,") != std::string::npos);
}

TEST_CASE("malformed input exits nonzero with a line number") {
  const std::string counts = work_dir() + "/bad.tsv";
  write_file(counts,
             "gene\tsubject\tgroup\tcount\tread_depth\n"
             "g\ts1\ta\t1\t1\n"
             "g\ts2\ta\tnot_a_number\t1\n");
  const auto r = run("test " + counts + " --out " + work_dir() + "/bad_out");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find(":3:") != std::string::npos);
}

TEST_CASE("fit and w1 emit usable tables") {
  const std::string counts = work_dir() + "/fw.tsv";
  write_file(counts, k_counts);

  const std::string fp = work_dir() + "/fits";
  const auto rf = run("fit " + counts + " --b 20 --out " + fp);
  REQUIRE(rf.exit_code == 0);
  const auto fj = nlohmann::json::parse(read_file(fp + ".json"));
  REQUIRE(fj["genes"].size() == 2);
  CHECK(fj["genes"][0]["b_used"] == 20.0);
  CHECK(fj["genes"][0]["subjects"][0]["atoms"].is_array());
  CHECK(read_file(fp + ".csv").find("gene,subject,group,n_cells,") == 0);

  const std::string wp = work_dir() + "/w1d";
  const auto rw = run("w1 " + counts + " --b 20 --smoothed both --out " + wp);
  REQUIRE(rw.exit_code == 0);
  const auto wj = nlohmann::json::parse(read_file(wp + ".json"));
  CHECK(wj["genes"][0]["mixing"].size() == 4);
  CHECK(wj["genes"][0]["mixture"].size() == 4);
  // g1 separates groups a and b; the s1-s3 mixing distance is large.
  CHECK(wj["genes"][0]["mixing"][0][2].get<double>() > 3.0);

  SECTION("fit is byte-stable") {
    const std::string fp2 = work_dir() + "/fits2";
    REQUIRE(run("fit " + counts + " --b 20 --out " + fp2).exit_code == 0);
    CHECK(read_file(fp2 + ".json") == read_file(fp + ".json"));
    CHECK(read_file(fp2 + ".csv") == read_file(fp + ".csv"));
  }
}

TEST_CASE("signal estimates ship with standard errors") {
  const std::string p1 = work_dir() + "/sig1";
  const auto r1 = run("signal 3a --rounds 120 --seed 6 --out " + p1);
  REQUIRE(r1.exit_code == 0);
  const auto j = nlohmann::json::parse(read_file(p1 + ".json"));
  CHECK(j["model"] == "3a");
  CHECK(j["reps"] == 120);
  CHECK(j["d"].get<double>() > 0.5);   // separated populations
  CHECK(j["d_h"].get<double>() > 0.5);
  CHECK(j["se_d"].get<double>() > 0.0);

  SECTION("byte-stable rerun") {
    const std::string p2 = work_dir() + "/sig2";
    REQUIRE(run("signal 3a --rounds 120 --seed 6 --out " + p2).exit_code == 0);
    CHECK(read_file(p2 + ".json") == read_file(p1 + ".json"));
    CHECK(read_file(p2 + ".csv") == read_file(p1 + ".csv"));
  }

  SECTION("too few replicates is an error") {
    CHECK(run("signal 3a --rounds 10 --out " + work_dir() + "/x").exit_code == 1);
  }

  SECTION("unknown model id") {
    const auto bad = run("signal 7q --rounds 120 --out " + work_dir() + "/x");
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.find("1a..4c") != std::string::npos);
  }
}
