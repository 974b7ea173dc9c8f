#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "memcom/digest.hpp"
#include "memcom/gradcheck.hpp"
#include "memcom/ops.hpp"
#include "memcom/rng.hpp"
#include "memcom/tensor.hpp"

using namespace memcom;

namespace {

template <typename T>
Tensor<T> rand_tensor(Rng& rng, Shape shape, bool rg = false, double stddev = 1.0) {
  return randn<T>(rng, std::move(shape), stddev, rg);
}

// Reference matmul with explicit loops; accumulates in long double so it is
// independent of the production kernel.
template <typename T>
std::vector<T> matmul_oracle(const std::vector<T>& a, const std::vector<T>& b, int64_t m,
                             int64_t k, int64_t n) {
  std::vector<T> c(static_cast<size_t>(m * n), T(0));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (int64_t kk = 0; kk < k; ++kk)
        acc += static_cast<long double>(a[i * k + kk]) * static_cast<long double>(b[kk * n + j]);
      c[static_cast<size_t>(i * n + j)] = static_cast<T>(acc);
    }
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Digests
// ---------------------------------------------------------------------------

TEST(digest_test, sha256_known_vectors) {
  EXPECT_EQ(Sha256::hex(Sha256::digest("", 0)),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(Sha256::hex(Sha256::digest("abc", 3)),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const char* msg = "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq";
  EXPECT_EQ(Sha256::hex(Sha256::digest(msg, strlen(msg))),
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST(digest_test, sha256_streaming_matches_oneshot) {
  std::vector<uint8_t> data(1000);
  for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<uint8_t>(i * 31 + 7);
  auto oneshot = Sha256::digest(data.data(), data.size());
  Sha256 s;
  s.update(data.data(), 1);
  s.update(data.data() + 1, 63);
  s.update(data.data() + 64, 129);
  s.update(data.data() + 193, data.size() - 193);
  EXPECT_EQ(Sha256::hex(s.finish()), Sha256::hex(oneshot));
}

TEST(digest_test, crc32_known_vector) {
  EXPECT_EQ(crc32("123456789", 9), 0xCBF43926u);
  EXPECT_EQ(crc32("", 0), 0u);
}

TEST(digest_test, crc32_streaming_matches_oneshot) {
  const char* msg = "streaming consistency check payload";
  size_t len = strlen(msg);
  uint32_t c = crc32_update(0, msg, 10);
  c = crc32_update(c, msg + 10, len - 10);
  EXPECT_EQ(c, crc32(msg, len));
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

TEST(rng_test, deterministic_replay) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(rng_test, split_streams_do_not_shift_each_other) {
  Rng root(7);
  Rng data = root.split("data");
  std::vector<uint64_t> frozen;
  for (int i = 0; i < 16; ++i) frozen.push_back(data.next_u64());

  // A new consumer splitting from the same root must not disturb "data".
  Rng root2(7);
  Rng other = root2.split("eval");
  for (int i = 0; i < 1000; ++i) other.next_u64();
  Rng data2 = root2.split("data");
  for (int i = 0; i < 16; ++i) EXPECT_EQ(data2.next_u64(), frozen[static_cast<size_t>(i)]);
}

TEST(rng_test, split_by_label_and_index_are_distinct) {
  Rng root(1);
  EXPECT_NE(root.split("a").next_u64(), root.split("b").next_u64());
  EXPECT_NE(root.split(uint64_t(0)).next_u64(), root.split(uint64_t(1)).next_u64());
  EXPECT_NE(root.split("0").next_u64(), root.split(uint64_t(0)).next_u64());
}

TEST(rng_test, uniform_range_and_moments) {
  Rng rng(3);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.5, 0.005);
  EXPECT_NEAR(var, 1.0 / 12.0, 0.005);
}

TEST(rng_test, uniform_int_covers_inclusive_bounds) {
  Rng rng(9);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) {
    int64_t v = rng.uniform_int(2, 6);
    ASSERT_GE(v, 2);
    ASSERT_LE(v, 6);
    counts[static_cast<size_t>(v - 2)]++;
  }
  for (int c : counts) EXPECT_GT(c, 800);
}

TEST(rng_test, normal_moments) {
  Rng rng(11);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.02);
  EXPECT_NEAR(sq / n, 1.0, 0.03);
}

TEST(rng_test, shuffle_is_a_permutation) {
  Rng rng(5);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[static_cast<size_t>(i)], i);
}

TEST(rng_test, state_roundtrip_resumes_stream) {
  Rng rng(17);
  rng.next_u64();
  rng.next_u64();
  Rng resumed(rng.key(), rng.counter(), true);
  EXPECT_EQ(rng.next_u64(), resumed.next_u64());
}

// ---------------------------------------------------------------------------
// Tensor core
// ---------------------------------------------------------------------------

TEST(tensor_test, leaf_shape_and_data_agree) {
  auto t = Tensor<float>::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.at({1, 2}), 6.0f);
  EXPECT_THROW(Tensor<float>::leaf({2, 3}, {1, 2, 3}), ConfigError);
}

TEST(tensor_test, non_finite_leaf_rejected) {
  EXPECT_THROW(Tensor<float>::leaf({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}),
               NumericError);
  EXPECT_THROW(Tensor<double>::leaf({1}, {std::numeric_limits<double>::infinity()}),
               NumericError);
}

TEST(tensor_test, non_finite_op_output_rejected_with_op_name) {
  auto t = Tensor<float>::full({2}, 1e30f);
  try {
    auto u = mul(t, t);  // overflows to inf in float
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(tensor_test, clone_is_independent) {
  auto t = Tensor<float>::leaf({2}, {1, 2}, true, "orig");
  auto c = t.clone();
  c.data_mut()[0] = 99;
  EXPECT_EQ(t.at({0}), 1.0f);
  EXPECT_EQ(c.at({0}), 99.0f);
  EXPECT_TRUE(c.requires_grad());
}

TEST(tensor_test, backward_simple_chain) {
  // loss = sum(a * b) with a = [1,2], b = [3,4]: da = b, db = a.
  auto a = Tensor<double>::leaf({2}, {1, 2}, true);
  auto b = Tensor<double>::leaf({2}, {3, 4}, true);
  auto loss = sum(mul(a, b));
  EXPECT_DOUBLE_EQ(loss.item(), 11.0);
  loss.backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(b.grad()[1], 2.0);
}

TEST(tensor_test, grads_accumulate_until_zeroed) {
  auto a = Tensor<double>::leaf({2}, {1, 2}, true);
  sum(a).backward();
  sum(a).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 2.0);
  a.zero_grad();
  sum(a).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 1.0);
}

TEST(tensor_test, second_backward_on_consumed_graph_fails) {
  auto a = Tensor<double>::leaf({2}, {1, 2}, true);
  auto loss = sum(mul(a, a));
  loss.backward();
  EXPECT_THROW(loss.backward(), ConfigError);
}

TEST(tensor_test, backward_requires_scalar_and_grad_path) {
  auto a = Tensor<double>::leaf({2}, {1, 2}, true);
  EXPECT_THROW(mul(a, a).backward(), ConfigError);  // non-scalar
  auto frozen = Tensor<double>::leaf({2}, {1, 2}, false);
  EXPECT_THROW(sum(frozen).backward(), ConfigError);  // no grad path
}

TEST(tensor_test, frozen_inputs_receive_no_grad) {
  auto a = Tensor<double>::leaf({2}, {1, 2}, true);
  auto w = Tensor<double>::leaf({2}, {5, 6}, false);
  auto loss = sum(mul(a, w));
  loss.backward();
  EXPECT_FALSE(w.node()->requires_grad);
  EXPECT_TRUE(w.node()->grad.empty());
}

TEST(tensor_test, nograd_guard_builds_no_graph) {
  auto a = Tensor<double>::leaf({2}, {1, 2}, true);
  NoGradGuard g;
  auto out = mul(a, a);
  EXPECT_FALSE(out.requires_grad());
}

TEST(tensor_test, backward_is_bitwise_deterministic) {
  Rng rng(123);
  auto a = rand_tensor<float>(rng, {8, 8}, true);
  auto b = rand_tensor<float>(rng, {8, 8}, true);
  auto run = [&]() {
    a.zero_grad();
    b.zero_grad();
    auto loss = sum(silu(matmul(a, b)));
    loss.backward();
    return std::make_pair(a.grad(), b.grad());
  };
  auto [ga1, gb1] = run();
  auto [ga2, gb2] = run();
  EXPECT_EQ(0, memcmp(ga1.data(), ga2.data(), ga1.size() * sizeof(float)));
  EXPECT_EQ(0, memcmp(gb1.data(), gb2.data(), gb1.size() * sizeof(float)));
}

// ---------------------------------------------------------------------------
// Op value oracles
// ---------------------------------------------------------------------------

TEST(ops_test, matmul_matches_triple_loop_oracle) {
  Rng rng(77);
  for (auto [m, k, n] : std::vector<std::array<int64_t, 3>>{
           {1, 1, 1}, {3, 5, 2}, {16, 32, 8}, {1, 128, 512}, {64, 32, 64}}) {
    auto a = rand_tensor<double>(rng, {m, k});
    auto b = rand_tensor<double>(rng, {k, n});
    auto c = matmul(a, b);
    auto ref = matmul_oracle(a.data(), b.data(), m, k, n);
    for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c.data()[i], ref[i], 1e-10);
  }
}

TEST(ops_test, matmul_batched_and_broadcast) {
  Rng rng(78);
  auto a = rand_tensor<double>(rng, {4, 3, 5});
  auto b3 = rand_tensor<double>(rng, {4, 5, 2});
  auto c3 = matmul(a, b3);
  EXPECT_EQ(c3.shape(), (Shape{4, 3, 2}));
  for (int64_t bi = 0; bi < 4; ++bi) {
    std::vector<double> sa(a.data().begin() + bi * 15, a.data().begin() + (bi + 1) * 15);
    std::vector<double> sb(b3.data().begin() + bi * 10, b3.data().begin() + (bi + 1) * 10);
    auto ref = matmul_oracle(sa, sb, 3, 5, 2);
    for (int64_t i = 0; i < 6; ++i)
      EXPECT_NEAR(c3.data()[static_cast<size_t>(bi * 6 + i)], ref[static_cast<size_t>(i)], 1e-10);
  }
  auto b2 = rand_tensor<double>(rng, {5, 2});
  auto cb = matmul(a, b2);
  for (int64_t bi = 0; bi < 4; ++bi) {
    std::vector<double> sa(a.data().begin() + bi * 15, a.data().begin() + (bi + 1) * 15);
    auto ref = matmul_oracle(sa, b2.data(), 3, 5, 2);
    for (int64_t i = 0; i < 6; ++i)
      EXPECT_NEAR(cb.data()[static_cast<size_t>(bi * 6 + i)], ref[static_cast<size_t>(i)], 1e-10);
  }
  EXPECT_THROW(matmul(a, rand_tensor<double>(rng, {4, 4, 2})), ConfigError);
}

// The prefix-cache equality contract requires that each output row of a
// product is bit-identical whether computed as part of a tall matrix or on
// its own suffix.  This probes the production GEMM at the shapes the model
// uses, in both precisions.
template <typename T>
void check_row_independence() {
  Rng rng(501);
  for (auto [m, k, n] : std::vector<std::array<int64_t, 3>>{
           {384, 128, 128}, {384, 128, 512}, {64, 128, 384}, {48, 32, 48}, {9, 128, 128}}) {
    auto a = rand_tensor<T>(rng, {m, k});
    auto b = rand_tensor<T>(rng, {k, n});
    auto full = matmul(a, b);
    for (int64_t sfx : {int64_t(1), int64_t(7), m / 2}) {
      if (sfx <= 0 || sfx > m) continue;
      auto asfx = slice(a, 0, m - sfx, m);
      auto part = matmul(asfx, b);
      ASSERT_EQ(0, memcmp(part.data().data(), full.data().data() + (m - sfx) * n,
                          static_cast<size_t>(sfx * n) * sizeof(T)))
          << "rows differ for m=" << m << " k=" << k << " n=" << n << " suffix=" << sfx;
    }
  }
}

TEST(ops_test, gemm_rows_independent_of_batch_height_f32) { check_row_independence<float>(); }
TEST(ops_test, gemm_rows_independent_of_batch_height_f64) { check_row_independence<double>(); }

TEST(ops_test, structural_ops_roundtrip) {
  Rng rng(80);
  auto x = rand_tensor<double>(rng, {3, 4, 5});
  auto tp = transpose_last2(x);
  EXPECT_EQ(tp.shape(), (Shape{3, 5, 4}));
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 5; ++j) EXPECT_EQ(tp.at({b, j, i}), x.at({b, i, j}));

  auto pm = permute3(x, {2, 0, 1});
  EXPECT_EQ(pm.shape(), (Shape{5, 3, 4}));
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 5; ++j) EXPECT_EQ(pm.at({j, b, i}), x.at({b, i, j}));

  auto rs = reshape(x, {12, 5});
  EXPECT_EQ(rs.at({7, 3}), x.data()[7 * 5 + 3]);

  auto sl = slice(x, 1, 1, 3);
  EXPECT_EQ(sl.shape(), (Shape{3, 2, 5}));
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 5; ++j) EXPECT_EQ(sl.at({b, i, j}), x.at({b, i + 1, j}));

  auto y = rand_tensor<double>(rng, {3, 2, 5});
  auto cc = concat(1, std::vector<Tensor<double>>{x, y});
  EXPECT_EQ(cc.shape(), (Shape{3, 6, 5}));
  EXPECT_EQ(cc.at({2, 4, 1}), y.at({2, 0, 1}));
  EXPECT_EQ(cc.at({1, 2, 3}), x.at({1, 2, 3}));
}

TEST(ops_test, repeat_heads_maps_groups) {
  auto x = Tensor<double>::leaf({2, 1, 2}, {1, 2, 3, 4});
  auto r = repeat_heads(x, 3);
  EXPECT_EQ(r.shape(), (Shape{6, 1, 2}));
  for (int64_t h = 0; h < 6; ++h) {
    EXPECT_EQ(r.at({h, 0, 0}), x.at({h / 3, 0, 0}));
    EXPECT_EQ(r.at({h, 0, 1}), x.at({h / 3, 0, 1}));
  }
}

TEST(ops_test, softmax_rows_normalized_and_shift_invariant) {
  Rng rng(81);
  auto x = rand_tensor<double>(rng, {6, 9});
  auto p = softmax_lastdim(x);
  for (int64_t r = 0; r < 6; ++r) {
    double s = 0;
    for (int64_t j = 0; j < 9; ++j) s += p.at({r, j});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto shifted = add(x, Tensor<double>::full({6, 9}, 123.25));
  auto p2 = softmax_lastdim(shifted);
  for (size_t i = 0; i < p.data().size(); ++i) EXPECT_NEAR(p2.data()[i], p.data()[i], 1e-12);
  // Two-way closed form.
  auto two = Tensor<double>::leaf({1, 2}, {0.0, std::log(3.0)});
  auto pt = softmax_lastdim(two);
  EXPECT_NEAR(pt.at({0, 0}), 0.25, 1e-12);
  EXPECT_NEAR(pt.at({0, 1}), 0.75, 1e-12);
}

TEST(ops_test, causal_softmax_masks_exactly) {
  Rng rng(82);
  int64_t h = 2, tq = 4, prefix = 3, tk = prefix + tq;
  auto s = rand_tensor<double>(rng, {h, tq, tk});
  auto p = causal_softmax(s, prefix);
  for (int64_t hh = 0; hh < h; ++hh)
    for (int64_t j = 0; j < tq; ++j) {
      double rowsum = 0;
      for (int64_t c = 0; c < tk; ++c) {
        double v = p.at({hh, j, c});
        if (c > prefix + j)
          EXPECT_EQ(v, 0.0);
        else
          rowsum += v;
      }
      EXPECT_NEAR(rowsum, 1.0, 1e-12);
    }
  // The allowed slice must match plain softmax of that slice.
  auto row = slice(slice(s, 0, 1, 2), 1, 2, 3);  // head 1, query 2 -> allowed cols 0..5
  auto rowp = softmax_lastdim(slice(row, 2, 0, prefix + 2 + 1));
  for (int64_t c = 0; c <= prefix + 2; ++c)
    EXPECT_NEAR(p.at({1, 2, c}), rowp.at({0, 0, c}), 1e-12);
  EXPECT_THROW(causal_softmax(s, prefix + 1), ConfigError);
}

TEST(ops_test, rope_closed_form_and_relative_property) {
  // Unit x-axis vector rotates to (cos th, sin th) in each channel pair.
  int64_t d = 8;
  std::vector<double> v(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < d / 2; ++i) v[static_cast<size_t>(2 * i)] = 1.0;
  auto x = Tensor<double>::leaf({1, 1, d}, v);
  int64_t pos = 13;
  auto r = rope_apply(x, {pos}, 10000.0);
  for (int64_t i = 0; i < d / 2; ++i) {
    double th = static_cast<double>(pos) * std::pow(10000.0, -2.0 * i / static_cast<double>(d));
    EXPECT_NEAR(r.at({0, 0, 2 * i}), std::cos(th), 1e-12);
    EXPECT_NEAR(r.at({0, 0, 2 * i + 1}), std::sin(th), 1e-12);
  }

  // Norm preservation and dependence on relative offset only.
  Rng rng(83);
  auto q = rand_tensor<double>(rng, {1, 1, d});
  auto k = rand_tensor<double>(rng, {1, 1, d});
  auto dot = [&](const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0;
    for (int64_t i = 0; i < d; ++i) acc += a.at({0, 0, i}) * b.at({0, 0, i});
    return acc;
  };
  auto q1 = rope_apply(q, {100}, 10000.0);
  auto k1 = rope_apply(k, {93}, 10000.0);
  auto q2 = rope_apply(q, {407}, 10000.0);
  auto k2 = rope_apply(k, {400}, 10000.0);
  EXPECT_NEAR(dot(q1, k1), dot(q2, k2), 1e-9);
  EXPECT_NEAR(dot(q1, q1), dot(q, q), 1e-9);
  // Position zero is the identity.
  auto r0 = rope_apply(q, {0}, 10000.0);
  for (int64_t i = 0; i < d; ++i) EXPECT_EQ(r0.at({0, 0, i}), q.at({0, 0, i}));
}

TEST(ops_test, embedding_lookup_gathers_and_scatters) {
  auto table = Tensor<double>::leaf({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31}, true);
  auto e = embedding_lookup(table, {3, 1, 3});
  EXPECT_EQ(e.shape(), (Shape{3, 2}));
  EXPECT_EQ(e.at({0, 0}), 30.0);
  EXPECT_EQ(e.at({1, 1}), 11.0);
  sum(e).backward();
  // Row 3 referenced twice accumulates twice.
  EXPECT_DOUBLE_EQ(table.grad()[6], 2.0);
  EXPECT_DOUBLE_EQ(table.grad()[2], 1.0);
  EXPECT_DOUBLE_EQ(table.grad()[0], 0.0);
  EXPECT_THROW(embedding_lookup(table, {4}), ConfigError);
}

TEST(ops_test, cross_entropy_uniform_and_peaked) {
  int64_t v = 16;
  auto logits = Tensor<double>::zeros({3, v});
  auto loss = cross_entropy(logits, {0, 5, 9}, {1, 1, 1});
  EXPECT_NEAR(loss.item(), std::log(static_cast<double>(v)), 1e-12);

  std::vector<double> peaked(static_cast<size_t>(v), 0.0);
  peaked[7] = 50.0;
  auto l2 = Tensor<double>::leaf({1, v}, peaked);
  EXPECT_NEAR(cross_entropy(l2, {7}, {1}).item(), 0.0, 1e-12);
}

TEST(ops_test, cross_entropy_mask_excludes_rows_exactly) {
  Rng rng(84);
  auto base = rand_tensor<double>(rng, {4, 8});
  auto loss1 = cross_entropy(base, {1, 2, 3, 4}, {1, 0, 1, 0});

  // Perturb only the masked-out rows; the loss must not move at all.
  std::vector<double> mod = base.data();
  for (int64_t j = 0; j < 8; ++j) {
    mod[static_cast<size_t>(1 * 8 + j)] += 3.5;
    mod[static_cast<size_t>(3 * 8 + j)] -= 2.0;
  }
  auto loss2 = cross_entropy(Tensor<double>::leaf({4, 8}, mod), {1, 2, 3, 4}, {1, 0, 1, 0});
  EXPECT_EQ(loss1.item(), loss2.item());

  // Gradient is exactly zero on masked-out rows.
  auto lg = Tensor<double>::leaf({4, 8}, base.data(), true);
  cross_entropy(lg, {1, 2, 3, 4}, {1, 0, 1, 0}).backward();
  for (int64_t j = 0; j < 8; ++j) {
    EXPECT_EQ(lg.grad()[static_cast<size_t>(8 + j)], 0.0);
    EXPECT_EQ(lg.grad()[static_cast<size_t>(24 + j)], 0.0);
  }
  EXPECT_THROW(cross_entropy(base, {1, 2, 3, 4}, {0, 0, 0, 0}), ConfigError);
}

TEST(ops_test, cross_entropy_matches_independent_logsumexp) {
  Rng rng(85);
  auto x = rand_tensor<double>(rng, {5, 32}, false, 3.0);
  std::vector<int32_t> tgt = {31, 0, 7, 15, 3};
  auto loss = cross_entropy(x, tgt, {1, 1, 1, 1, 1});
  long double acc = 0;
  for (int64_t i = 0; i < 5; ++i) {
    long double z = 0;
    for (int64_t j = 0; j < 32; ++j)
      z += std::exp(static_cast<long double>(x.at({i, j})));
    acc += std::log(z) - static_cast<long double>(x.at({i, tgt[static_cast<size_t>(i)]}));
  }
  EXPECT_NEAR(loss.item(), static_cast<double>(acc / 5.0L), 1e-10);
}

// ---------------------------------------------------------------------------
// Gradient property checks: 20 random instances per op, double precision
// ---------------------------------------------------------------------------

namespace {

// loss = sum(f(x) * probe) with a fixed random probe so output grads vary.
template <typename F>
void grad_property(F make_loss, int instances, uint64_t seed, double tol = 1e-4) {
  Rng rng(seed);
  for (int i = 0; i < instances; ++i) {
    Rng inst = rng.split(static_cast<uint64_t>(i));
    auto rep = make_loss(inst);
    EXPECT_LT(rep.max_rel_err, tol) << "instance " << i << " worst param " << rep.worst_param
                                    << " coord " << rep.worst_coord << " analytic "
                                    << rep.worst_analytic << " numeric " << rep.worst_numeric;
  }
}

}  // namespace

TEST(grad_test, matmul) {
  grad_property(
      [](Rng rng) {
        auto a = rand_tensor<double>(rng, {rng.uniform_int(1, 4), rng.uniform_int(1, 5)}, true);
        auto b = rand_tensor<double>(rng, {a.shape()[1], rng.uniform_int(1, 4)}, true);
        auto probe = rand_tensor<double>(rng, {a.shape()[0], b.shape()[1]});
        auto loss_fn = [&]() { return sum(mul(matmul(a, b), probe)); };
        return gradcheck_params<double>(loss_fn, {{"a", a}, {"b", b}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1001);
}

TEST(grad_test, matmul_batched_broadcast) {
  grad_property(
      [](Rng rng) {
        auto a = rand_tensor<double>(rng, {3, 2, 4}, true);
        auto b = rand_tensor<double>(rng, {4, 3}, true);
        auto probe = rand_tensor<double>(rng, {3, 2, 3});
        auto loss_fn = [&]() { return sum(mul(matmul(a, b), probe)); };
        return gradcheck_params<double>(loss_fn, {{"a", a}, {"b", b}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1002);
}

TEST(grad_test, elementwise_and_structural) {
  grad_property(
      [](Rng rng) {
        auto x = rand_tensor<double>(rng, {4, 6}, true);
        auto y = rand_tensor<double>(rng, {4, 6}, true);
        auto probe = rand_tensor<double>(rng, {2, 12});
        auto loss_fn = [&]() {
          auto z = add(mul(silu(x), y), scale(x, 0.5));
          auto r = reshape(concat(0, std::vector<Tensor<double>>{slice(z, 0, 0, 2),
                                                                 slice(z, 0, 2, 4)}),
                           {2, 12});
          return sum(mul(r, probe));
        };
        return gradcheck_params<double>(loss_fn, {{"x", x}, {"y", y}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1003);
}

TEST(grad_test, permute_transpose_repeat) {
  grad_property(
      [](Rng rng) {
        auto x = rand_tensor<double>(rng, {2, 3, 4}, true);
        auto probe = rand_tensor<double>(rng, {4, 4, 3});
        auto loss_fn = [&]() {
          auto r = repeat_heads(x, 2);                       // [4,3,4]
          auto t = transpose_last2(permute3(r, {0, 1, 2}));  // [4,4,3]
          return sum(mul(t, probe));
        };
        return gradcheck_params<double>(loss_fn, {{"x", x}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1004);
}

TEST(grad_test, softmax_variants) {
  grad_property(
      [](Rng rng) {
        auto x = rand_tensor<double>(rng, {3, 7}, true);
        int64_t prefix = 2;
        auto s = rand_tensor<double>(rng, {2, 3, prefix + 3}, true);
        auto p1 = rand_tensor<double>(rng, {3, 7});
        auto p2 = rand_tensor<double>(rng, {2, 3, prefix + 3});
        auto loss_fn = [&]() {
          return add(sum(mul(softmax_lastdim(x), p1)),
                     sum(mul(causal_softmax(s, prefix), p2)));
        };
        return gradcheck_params<double>(loss_fn, {{"x", x}, {"s", s}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1005);
}

TEST(grad_test, rmsnorm) {
  grad_property(
      [](Rng rng) {
        auto x = rand_tensor<double>(rng, {5, 8}, true);
        auto g = rand_tensor<double>(rng, {8}, true);
        auto probe = rand_tensor<double>(rng, {5, 8});
        auto loss_fn = [&]() { return sum(mul(rmsnorm(x, g, 1e-6), probe)); };
        return gradcheck_params<double>(loss_fn, {{"x", x}, {"g", g}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1006);
}

TEST(grad_test, rope) {
  grad_property(
      [](Rng rng) {
        auto x = rand_tensor<double>(rng, {3, 2, 8}, true);
        std::vector<int64_t> pos = {5, 90, 411};
        auto probe = rand_tensor<double>(rng, {3, 2, 8});
        auto loss_fn = [&]() { return sum(mul(rope_apply(x, pos, 10000.0), probe)); };
        return gradcheck_params<double>(loss_fn, {{"x", x}}, 1e-5, -1, rng.split("gc"));
      },
      20, 1007);
}

TEST(grad_test, embedding_and_cross_entropy) {
  grad_property(
      [](Rng rng) {
        auto table = rand_tensor<double>(rng, {6, 4}, true);
        std::vector<int32_t> ids = {0, 3, 3, 5};
        std::vector<int32_t> tgt = {1, 0, 2, 3};
        std::vector<uint8_t> mask = {1, 1, 0, 1};
        auto w = rand_tensor<double>(rng, {4, 4}, true);
        auto loss_fn = [&]() {
          auto e = embedding_lookup(table, ids);
          return cross_entropy(matmul(e, w), tgt, mask);
        };
        return gradcheck_params<double>(loss_fn, {{"table", table}, {"w", w}}, 1e-5, -1,
                                        rng.split("gc"));
      },
      20, 1008);
}
