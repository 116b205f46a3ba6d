#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "latok/tasks.hpp"

using namespace latok;
namespace fs = std::filesystem;

namespace {

std::vector<int> board_tokens(const std::vector<int>& board, const TaskSpec& spec) {
  std::vector<int> t;
  for (int v : board) t.push_back(v - 1);
  t.resize((size_t)spec.seq_len, spec.pad_id);
  return t;
}

fs::path temp_file(const char* tag) {
  return fs::temp_directory_path() / (std::string("latok_tasks_") + tag + "_" +
                                      std::to_string(::getpid()) + ".ndjson");
}

}  // namespace

TEST_CASE("base-2 boards all validate and any single-cell change fails") {
  auto boards = sudoku_enumerate_all(2);
  REQUIRE(boards.size() == 288);
  TaskSpec spec = task_sudoku_gen(2, 16);
  for (const auto& b : boards) {
    REQUIRE(sudoku_valid(b, 2));
    REQUIRE(validate_sample(spec, board_tokens(b, spec)).ok);
  }
  Rng rng(7, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto b = boards[(size_t)rng.below_int((int)boards.size())];
    int cell = rng.below_int(16);
    int old = b[(size_t)cell];
    int repl;
    do repl = rng.below_int(4) + 1;
    while (repl == old);
    b[(size_t)cell] = repl;
    auto res = validate_sample(spec, board_tokens(b, spec));
    REQUIRE_FALSE(res.ok);
    REQUIRE(res.reason == "constraint-violated");
  }
}

TEST_CASE("generated instances validate for every benchmark task") {
  for (const char* name : {"sudoku-gen", "sudoku-puzzle", "zebra", "countdown"}) {
    INFO("task " << name);
    TaskSpec spec = task_by_name(name);
    auto ds = generate_dataset(spec, 1000, 123);
    for (const auto& inst : ds) {
      REQUIRE((int)inst.tokens.size() == spec.seq_len);
      REQUIRE(inst.prompt_len >= 0);
      REQUIRE(inst.prompt_len < spec.seq_len);
      auto res = validate_sample(spec, inst.tokens);
      INFO("reason " << res.reason);
      REQUIRE(res.ok);
    }
  }
}

TEST_CASE("large board task generates and validates") {
  TaskSpec spec = task_by_name("sudoku-large");
  REQUIRE(spec.vocab == 38);
  REQUIRE(spec.seq_len == 1536);
  auto ds = generate_dataset(spec, 2, 9);
  for (const auto& inst : ds) {
    REQUIRE(validate_sample(spec, inst.tokens).ok);
    REQUIRE(task_soft_loss(spec, inst.tokens) == 0.0);
  }
}

TEST_CASE("benchmark table dimensions") {
  struct Row {
    const char* name;
    int seq_len, vocab;
  };
  for (Row r : {Row{"sudoku-gen", 128, 11}, Row{"sudoku-puzzle", 192, 14},
                Row{"zebra", 384, 23}, Row{"countdown", 64, 20},
                Row{"sudoku-large", 1536, 38}}) {
    TaskSpec spec = task_by_name(r.name);
    REQUIRE(spec.seq_len == r.seq_len);
    REQUIRE(spec.vocab == r.vocab);
    REQUIRE(spec.mask_id == spec.vocab - 1);
    REQUIRE((int)spec.token_names.size() == spec.vocab);
    std::set<std::string> uniq(spec.token_names.begin(), spec.token_names.end());
    REQUIRE(uniq.size() == spec.token_names.size());
  }
  REQUIRE_THROWS(task_by_name("no-such-task"));
}

TEST_CASE("dataset generation is deterministic and extension-stable") {
  TaskSpec spec = task_by_name("countdown");
  auto a = generate_dataset(spec, 8, 55);
  auto b = generate_dataset(spec, 8, 55);
  auto c = generate_dataset(spec, 12, 55);
  for (int i = 0; i < 8; ++i) {
    REQUIRE(a[(size_t)i].tokens == b[(size_t)i].tokens);
    REQUIRE(a[(size_t)i].tokens == c[(size_t)i].tokens);
    REQUIRE(a[(size_t)i].prompt_len == c[(size_t)i].prompt_len);
  }
  auto d = generate_dataset(spec, 8, 56);
  bool any_diff = false;
  for (int i = 0; i < 8; ++i) any_diff = any_diff || a[(size_t)i].tokens != d[(size_t)i].tokens;
  REQUIRE(any_diff);
}

TEST_CASE("ndjson dataset round trips") {
  TaskSpec spec = task_by_name("zebra");
  auto ds = generate_dataset(spec, 16, 42);
  fs::path path = temp_file("roundtrip");
  write_dataset(path.string(), spec, ds);
  auto back = read_dataset(path.string(), spec);
  REQUIRE(back.size() == ds.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    REQUIRE(back[i].tokens == ds[i].tokens);
    REQUIRE(back[i].prompt_len == ds[i].prompt_len);
    REQUIRE(back[i].meta == ds[i].meta);
  }
  TaskSpec other = task_by_name("countdown");
  REQUIRE_THROWS(read_dataset(path.string(), other));
  fs::remove(path);

  fs::path bad = temp_file("badlen");
  {
    std::ofstream out(bad);
    out << R"({"task":"zebra","tokens":[1,2,3],"prompt_len":1,"meta":{}})" << "\n";
  }
  REQUIRE_THROWS(read_dataset(bad.string(), spec));
  fs::remove(bad);
  REQUIRE_THROWS(read_dataset("/no/such/dir/x.ndjson", spec));
}

TEST_CASE("soft constraint loss anchors") {
  TaskSpec g2 = task_sudoku_gen(2, 16);
  TaskSpec g6 = task_sudoku_gen(6, 1536, "sudoku-large");

  SECTION("valid boards score zero, and zero means valid") {
    for (const auto& b : sudoku_enumerate_all(2))
      REQUIRE(task_soft_loss(g2, board_tokens(b, g2)) == 0.0);
    // Mix of intact boards, lightly corrupted boards, and uniform noise so
    // both sides of the equivalence are exercised.
    Rng rng(11, 0);
    auto boards = sudoku_enumerate_all(2);
    int zero_count = 0, nonzero_count = 0;
    for (int trial = 0; trial < 400; ++trial) {
      std::vector<int> tokens;
      int mode = trial % 3;
      if (mode == 2) {
        for (int i = 0; i < 16; ++i) tokens.push_back(rng.below_int(4));
      } else {
        auto b = boards[(size_t)rng.below_int((int)boards.size())];
        for (int v : b) tokens.push_back(v - 1);
        if (mode == 1) tokens[(size_t)rng.below_int(16)] = rng.below_int(4);
      }
      double loss = task_soft_loss(g2, tokens);
      bool valid = validate_sample(g2, tokens).ok;  // seq_len is 16, already full
      REQUIRE((loss == 0.0) == valid);
      REQUIRE(loss >= 0.0);
      REQUIRE(loss <= 12.0);
      zero_count += valid;
      nonzero_count += !valid;
    }
    REQUIRE(zero_count > 0);
    REQUIRE(nonzero_count > 0);
  }

  SECTION("all-identical large board scores 108 units at 35/36 each") {
    std::vector<int> tokens((size_t)36 * 36, 5);
    tokens.resize((size_t)g6.seq_len, g6.pad_id);
    REQUIRE_THAT(task_soft_loss(g6, tokens), Catch::Matchers::WithinAbs(105.0, 1e-9));
  }

  SECTION("non-digit filler counts as fully missing") {
    std::vector<int> tokens((size_t)16, g2.pad_id);
    REQUIRE(task_soft_loss(g2, tokens) == 12.0);  // 3n empty units for n = 4
  }

  SECTION("swapped pair matches a brute-force recount") {
    Rng rng(3, 1);
    auto boards = sudoku_enumerate_all(2);
    for (int trial = 0; trial < 32; ++trial) {
      auto b = boards[(size_t)rng.below_int((int)boards.size())];
      int i = rng.below_int(16), j;
      do j = rng.below_int(16);
      while (b[(size_t)j] == b[(size_t)i]);
      std::swap(b[(size_t)i], b[(size_t)j]);
      // Independent recount: per unit, count distinct digits present.
      auto distinct = [&](std::vector<int> cells) {
        std::set<int> s;
        for (int c : cells) s.insert(b[(size_t)c]);
        return (int)s.size();
      };
      double expect = 0;
      for (int r = 0; r < 4; ++r) expect += 1.0 - distinct({4 * r, 4 * r + 1, 4 * r + 2, 4 * r + 3}) / 4.0;
      for (int c = 0; c < 4; ++c) expect += 1.0 - distinct({c, c + 4, c + 8, c + 12}) / 4.0;
      for (int k : {0, 2, 8, 10}) expect += 1.0 - distinct({k, k + 1, k + 4, k + 5}) / 4.0;
      REQUIRE_THAT(task_soft_loss(g2, board_tokens(b, g2)),
                   Catch::Matchers::WithinAbs(expect, 1e-12));
    }
  }

  SECTION("rejects wrong task kind and short input") {
    REQUIRE_THROWS(task_soft_loss(task_by_name("countdown"), std::vector<int>(64, 0)));
    REQUIRE_THROWS(task_soft_loss(g2, std::vector<int>(3, 0)));
  }
}

TEST_CASE("token string bridge round trips") {
  for (const char* name : {"sudoku-gen", "sudoku-puzzle", "zebra", "countdown"}) {
    TaskSpec spec = task_by_name(name);
    auto ds = generate_dataset(spec, 250, 77);
    for (const auto& inst : ds) {
      std::string text = detokenize(spec, inst.tokens);
      REQUIRE(tokenize(spec, text) == inst.tokens);
    }
    for (int id = 0; id < spec.vocab; ++id) REQUIRE(token_id(spec, token_name(spec, id)) == id);
    REQUIRE_THROWS(token_id(spec, "definitely-not-a-token"));
    REQUIRE_THROWS(token_name(spec, spec.vocab));
    REQUIRE_THROWS(token_name(spec, -1));
  }
}

TEST_CASE("puzzle task hole placement") {
  SECTION("default spec plants exactly the configured holes") {
    TaskSpec spec = task_by_name("sudoku-puzzle");
    REQUIRE(spec.holes == 40);
    auto ds = generate_dataset(spec, 20, 5);
    int empty_id = 9;
    for (const auto& inst : ds) {
      int empties = (int)std::count(inst.tokens.begin(), inst.tokens.end(), empty_id);
      REQUIRE(empties == 40);
      REQUIRE(inst.prompt_len == 83);  // BOS + 81 cells + SEP
    }
  }

  SECTION("zero holes make the prompt a copy of the solution") {
    TaskSpec spec = task_sudoku_puzzle(3, 192, 0);
    Rng rng(21, 0);
    PuzzleInstance inst = task_generate(spec, rng);
    for (int k = 0; k < 81; ++k) REQUIRE(inst.tokens[(size_t)1 + k] == inst.tokens[(size_t)83 + k]);
    REQUIRE(validate_sample(spec, inst.tokens).ok);
  }

  SECTION("all holes still validates") {
    TaskSpec spec = task_sudoku_puzzle(3, 192, 81);
    Rng rng(22, 0);
    PuzzleInstance inst = task_generate(spec, rng);
    REQUIRE((int)std::count(inst.tokens.begin(), inst.tokens.end(), 9) == 81);
    REQUIRE(validate_sample(spec, inst.tokens).ok);
  }

  SECTION("solution contradicting a filled prompt cell is rejected") {
    // Two distinct valid base-2 boards: prompt from one, solution from the
    // other. Both halves are valid boards, so only the clue check can fire.
    TaskSpec spec = task_sudoku_puzzle(2, 35, 0);
    auto boards = sudoku_enumerate_all(2);
    const auto &a = boards[0], &b = boards[1];
    REQUIRE(a != b);
    std::vector<int> tokens = {5};                       // BOS
    for (int v : a) tokens.push_back(v - 1);             // prompt, no holes
    tokens.push_back(6);                                 // SEP
    for (int v : b) tokens.push_back(v - 1);             // mismatched solution
    tokens.push_back(7);                                 // EOS
    auto res = validate_sample(spec, tokens);
    REQUIRE_FALSE(res.ok);
    REQUIRE(res.reason == "clue-contradicted");
  }
}

TEST_CASE("countdown validation reasons") {
  TaskSpec spec = task_by_name("countdown");
  auto seq = [&](const std::string& text) {
    std::vector<int> t = tokenize(spec, text);
    t.push_back(countdown_tok::kEos);
    t.resize((size_t)spec.seq_len, spec.pad_id);
    return t;
  };
  auto reason = [&](const std::string& text) { return validate_sample(spec, seq(text)).reason; };

  REQUIRE(validate_sample(spec, seq("2 , 3 , 4 , 5 , 6 : 5 : 2 + 3 = 5")).ok);
  REQUIRE(reason("2 , 3 , 4 , 5 , 6 : 6 : 2 + 3 = 6") == "bad-arithmetic");
  REQUIRE(reason("2 , 3 , 4 , 5 , 6 : 4 : 2 + 3 = 5 , 7 + 7 = 1 4") == "operand-unavailable");
  REQUIRE(reason("2 , 3 , 4 , 5 , 6 : 9 : 2 + 3 = 5") == "wrong-target");
  REQUIRE(reason("2 , 3 , 4 , 5 , 6 : 1 : 6 / 4 = 1") == "bad-arithmetic");   // inexact division
  REQUIRE(reason("2 , 3 , 4 , 5 , 6 : 0 : 3 - 5 = 0") == "bad-arithmetic");   // negative result
  REQUIRE(validate_sample(spec, seq("2 , 3 , 4 , 5 , 6 : 1 0 : 2 + 3 = 5 , 5 + 5 = 1 0")).ok);
  REQUIRE(reason("2 , 3 , 4 , 5 : 5 : 2 + 3 = 5") == "bad-operand-count");

  SECTION("structural failures") {
    std::vector<int> t = seq("2 , 3 , 4 , 5 , 6 : 5 : 2 + 3 = 5");
    t[(size_t)spec.seq_len - 1] = spec.mask_id;
    REQUIRE(validate_sample(spec, t).reason == "mask-remaining");

    t = tokenize(spec, "2 , 3 , 4 , 5 , 6 : 5 : 2 + 3 = 5");  // EOS missing
    t.resize((size_t)spec.seq_len, spec.pad_id);
    REQUIRE(validate_sample(spec, t).reason == "missing-eos");

    t = seq("2 , 3 , 4 , 5 , 6 : 5 : 2 + 3 = 5");
    t[0] = countdown_tok::kComma;
    REQUIRE(validate_sample(spec, t).reason == "bad-operand");

    t = seq("2 , 3 , 4 , 5 , 6 : 5 : 2 + 3 = 5");
    REQUIRE(t[(size_t)spec.seq_len - 2] == spec.pad_id);
    t[(size_t)spec.seq_len - 2] = countdown_tok::kEos;  // stray token after EOS
    REQUIRE(validate_sample(spec, t).reason == "bad-padding");

    REQUIRE(validate_sample(spec, std::vector<int>(10, 0)).reason == "bad-length");
  }

  SECTION("meta agrees with the encoding") {
    auto ds = generate_dataset(spec, 100, 31);
    for (const auto& inst : ds) {
      CountdownParse p = countdown_parse(inst.tokens);
      REQUIRE(p.ok);
      REQUIRE(p.inst.target == inst.meta.at("target").get<int>());
      REQUIRE((int)p.inst.steps.size() == inst.meta.at("steps").get<int>());
      REQUIRE(inst.tokens[(size_t)inst.prompt_len - 1] == countdown_tok::kColon);
    }
  }
}

TEST_CASE("zebra clue semantics agree with a positional oracle") {
  // Exhaustive check on tiny instances: clue truth must match a direct
  // statement about the two holders' house indices.
  for (int H : {2, 3, 4}) {
    ZebraInstance z;
    z.houses = H;
    z.attrs = 2;
    z.grid.assign(2, std::vector<int>(H));
    Rng rng(100 + H, 0);
    for (auto& row : z.grid) {
      for (int h = 0; h < H; ++h) row[(size_t)h] = h + 1;
      rng.shuffle(row);
    }
    auto house_of = [&](int a, int v) {
      for (int h = 0; h < H; ++h)
        if (z.grid[(size_t)a - 1][(size_t)h] == v) return h;
      return -1;
    };
    for (int a1 = 1; a1 <= 2; ++a1)
      for (int v1 = 1; v1 <= H; ++v1)
        for (int a2 = 1; a2 <= 2; ++a2)
          for (int v2 = 1; v2 <= H; ++v2) {
            int h1 = house_of(a1, v1), h2 = house_of(a2, v2);
            ZebraClue c;
            c.a1 = a1;
            c.v1 = v1;
            c.a2 = a2;
            c.v2 = v2;
            c.type = ZebraClue::EQ;
            REQUIRE(zebra_clue_holds(z, c) == (h1 == h2));
            c.type = ZebraClue::NEQ;
            REQUIRE(zebra_clue_holds(z, c) == (h1 != h2));
            c.type = ZebraClue::LEFT;
            REQUIRE(zebra_clue_holds(z, c) == (h1 < h2));
            c.type = ZebraClue::IMM_LEFT;
            REQUIRE(zebra_clue_holds(z, c) == (h2 == h1 + 1));
            c.type = ZebraClue::RIGHT;
            REQUIRE(zebra_clue_holds(z, c) == (h1 > h2));
            c.type = ZebraClue::IMM_RIGHT;
            REQUIRE(zebra_clue_holds(z, c) == (h1 == h2 + 1));
            c.type = ZebraClue::NEIGHBOR;
            REQUIRE(zebra_clue_holds(z, c) == (std::abs(h1 - h2) == 1));
          }
    for (int h = 1; h <= H; ++h)
      for (int a = 1; a <= 2; ++a)
        for (int v = 1; v <= H; ++v) {
          ZebraClue c;
          c.type = ZebraClue::AT;
          c.house = h;
          c.a1 = a;
          c.v1 = v;
          REQUIRE(zebra_clue_holds(z, c) == (z.grid[(size_t)a - 1][(size_t)h - 1] == v));
        }
  }
}

TEST_CASE("zebra validation reasons") {
  TaskSpec spec = task_by_name("zebra");

  SECTION("single-attribute instances avoid identity clues") {
    Rng rng(44, 0);
    for (int trial = 0; trial < 200; ++trial) {
      ZebraInstance z = zebra_generate(2, 1, 5, rng);
      for (const auto& c : z.clues) REQUIRE(c.type != ZebraClue::EQ);
      REQUIRE(zebra_check(z));
      int plen = 0;
      auto tokens = zebra_encode(z, &plen);
      REQUIRE(plen >= 2);
      REQUIRE(tokens[(size_t)plen - 1] == zebra_tok::kSep);
      auto p = zebra_parse(tokens, 2, 1);
      REQUIRE(p.ok);
      REQUIRE(p.inst.grid == z.grid);
      REQUIRE(p.inst.clues.size() == z.clues.size());
    }
  }

  SECTION("swapping the solution order breaks an ordering clue") {
    ZebraInstance z;
    z.houses = 2;
    z.attrs = 1;
    z.grid = {{1, 2}};
    ZebraClue c;
    c.type = ZebraClue::LEFT;
    c.a1 = 1;
    c.v1 = 1;
    c.a2 = 1;
    c.v2 = 2;
    z.clues = {c};
    REQUIRE(zebra_check(z));
    z.grid = {{2, 1}};
    std::string why;
    REQUIRE_FALSE(zebra_check(z, &why));
    REQUIRE(why == "clue-violated");
  }

  SECTION("corrupting one solution digit fails validation") {
    auto ds = generate_dataset(spec, 30, 8);
    Rng rng(9, 0);
    for (auto inst : ds) {
      // Solution occupies the 30 digits before EOS; EOS sits right after.
      int sol_start = inst.prompt_len;
      int cell = sol_start + rng.below_int(30);
      int old = inst.tokens[(size_t)cell];
      int repl;
      do repl = rng.below_int(5);
      while (repl == old);
      inst.tokens[(size_t)cell] = repl;
      auto res = validate_sample(spec, inst.tokens);
      REQUIRE_FALSE(res.ok);
      bool expected = res.reason == "grid-not-permutation" || res.reason == "clue-violated";
      INFO("reason " << res.reason);
      REQUIRE(expected);
    }
  }

  SECTION("structural failures") {
    auto inst = generate_dataset(spec, 1, 8)[0];
    auto t = inst.tokens;
    t[0] = zebra_tok::kPad;
    REQUIRE(validate_sample(spec, t).reason == "missing-bos");

    t = inst.tokens;
    int eos_at = inst.prompt_len + 30;
    REQUIRE(t[(size_t)eos_at] == zebra_tok::kEos);
    t[(size_t)eos_at] = zebra_tok::kPad;
    REQUIRE(validate_sample(spec, t).reason == "missing-eos");

    t = inst.tokens;
    t[(size_t)spec.seq_len - 1] = zebra_tok::kBos;
    REQUIRE(validate_sample(spec, t).reason == "bad-padding");

    t = inst.tokens;
    t[(size_t)eos_at - 1] = zebra_tok::kEos;  // truncate the grid
    REQUIRE(validate_sample(spec, t).reason == "short-solution");
  }
}
