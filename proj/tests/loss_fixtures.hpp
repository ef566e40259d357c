#pragma once

// Random contrastive-loss instances shared by the loss tests and the acceptance run.

#include <array>
#include <string>
#include <vector>

#include "mxacl/grad_check.hpp"
#include "mxacl/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace mxacl::test {

inline std::vector<oracle::Vec> rows_of(const Tensor& t) {
  std::vector<oracle::Vec> out(t.dim(0), oracle::Vec(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) out[r][c] = t.at(r, c);
  return out;
}

inline std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  return y;
}

struct Instance {
  Tensor samples, labels_emb, teacher, teacher_emb;
  std::vector<int> y;
  int k;
};

/// N in 2..8, K in 2..4, width in 2..6.
inline Instance random_instance(Rng& rng) {
  Instance in;
  const std::size_t n = 2 + rng.below(7);
  in.k = 2 + static_cast<int>(rng.below(3));
  const std::size_t d = 2 + rng.below(5);
  in.samples = random_tensor({n, d}, rng);
  in.labels_emb = random_tensor({static_cast<std::size_t>(in.k), d}, rng);
  in.teacher = random_tensor({n, d}, rng);
  in.teacher_emb = random_tensor({static_cast<std::size_t>(in.k), d}, rng);
  in.y = random_labels(n, in.k, rng);
  return in;
}

/// SCL, ACL-Embed, ACL-CL and InfoNCE values.
inline std::array<double, 4> all_losses(const Instance& in, double tau) {
  Tape tape(false);
  ContrastiveBatch b(tau);
  b.append(tape.constant(in.samples), in.y);
  return {scl_loss(b).value.value().item(),
          acl_embed_loss(tape.constant(in.samples), in.y, tape.constant(in.labels_emb), tau).value.value().item(),
          acl_cl_loss(tape.constant(in.samples), tape.constant(in.labels_emb), tape.constant(in.teacher),
                      tape.constant(in.teacher_emb), in.y, tau)
              .value.value()
              .item(),
          info_nce_loss(tape.constant(in.samples), tape.constant(in.teacher), tau).value().item()};
}

/// The same four values from the nested-loop transcriptions.
inline std::array<double, 4> oracle_losses(const Instance& in, double tau) {
  return {oracle::scl(rows_of(in.samples), in.y, tau),
          oracle::acl_embed(rows_of(in.samples), in.y, rows_of(in.labels_emb), tau),
          oracle::acl_cl(rows_of(in.samples), rows_of(in.labels_emb), rows_of(in.teacher), rows_of(in.teacher_emb),
                         in.y, tau),
          oracle::info_nce(rows_of(in.samples), rows_of(in.teacher), tau)};
}

struct LossProbe {
  std::string name;
  TapeFn fn;
  Tensor point;
};

/// Every loss as a function of one input of the instance.
inline std::vector<LossProbe> loss_probes(const Instance& in) {
  const std::vector<int> y = in.y;
  const Tensor emb = in.labels_emb, teacher = in.teacher, temb = in.teacher_emb, s = in.samples;
  return {
      {"ce",
       [y](Tape&, Var x) {
         std::vector<int> binary(y.size());
         for (std::size_t i = 0; i < y.size(); ++i) binary[i] = y[i] % 2;
         return ce_loss(ops::slice(x, 1, 0, 2), binary);
       },
       s},
      {"scl",
       [y](Tape&, Var x) {
         ContrastiveBatch b(0.5);
         b.append(x, y);
         return scl_loss(b).value;
       },
       s},
      {"acl_embed", [y, emb](Tape& t, Var x) { return acl_embed_loss(x, y, t.constant(emb), 0.5).value; }, s},
      {"acl_embed_wrt_labels", [y, s](Tape& t, Var x) { return acl_embed_loss(t.constant(s), y, x, 0.5).value; },
       emb},
      {"acl_cl",
       [y, emb, teacher, temb](Tape& t, Var x) {
         return acl_cl_loss(x, t.constant(emb), t.constant(teacher), t.constant(temb), y, 0.5).value;
       },
       s},
      {"info_nce", [teacher](Tape& t, Var x) { return info_nce_loss(x, t.constant(teacher), 0.5); }, s},
  };
}

}  // namespace mxacl::test
