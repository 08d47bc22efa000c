#include "ambs/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_set>

#include "ambs/error.hpp"

namespace ambs::ag {

namespace {

constexpr float kMaskValue = -1e30f;

Var make(std::string op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->value = std::move(value);
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

// Accumulate only into inputs that participate in differentiation.
void push(Node& parent, const Tensor& g) {
  if (parent.requires_grad) parent.accumulate(g);
}

void same_shape_or_throw(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw DimensionError(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  Tensor& buf = grad_buffer();
  if (!buf.same_shape(g)) throw DimensionError("gradient shape " + g.shape_string() + " for value " + value.shape_string());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
  Tensor out = ambs::matmul(a.value(), b.value());
  return make("matmul", std::move(out), {a, b}, [](Node& n) {
    Node& a = *n.inputs[0];
    Node& b = *n.inputs[1];
    if (a.requires_grad) a.accumulate(matmul_nt(n.grad, b.value));
    if (b.requires_grad) b.accumulate(matmul_tn(a.value, n.grad));
  });
}

Var add(const Var& a, const Var& b) {
  same_shape_or_throw(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make("add", std::move(out), {a, b}, [](Node& n) {
    push(*n.inputs[0], n.grad);
    push(*n.inputs[1], n.grad);
  });
}

Var add_row(const Var& x, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || bv.size() != static_cast<std::size_t>(xv.cols())) {
    throw DimensionError("add_row: " + xv.shape_string() + " + " + bv.shape_string());
  }
  Tensor out = xv;
  for (int r = 0; r < xv.rows(); ++r) {
    auto row = out.row(r);
    for (int c = 0; c < xv.cols(); ++c) row[c] += bv[c];
  }
  return make("add_row", std::move(out), {x, b}, [](Node& n) {
    push(*n.inputs[0], n.grad);
    Node& b = *n.inputs[1];
    if (b.requires_grad) {
      Tensor g(b.value.shape());
      for (int r = 0; r < n.grad.rows(); ++r) {
        auto row = n.grad.row(r);
        for (int c = 0; c < n.grad.cols(); ++c) g[c] += row[c];
      }
      b.accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  same_shape_or_throw(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make("mul", std::move(out), {a, b}, [](Node& n) {
    Node& a = *n.inputs[0];
    Node& b = *n.inputs[1];
    if (a.requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= b.value[i];
      a.accumulate(g);
    }
    if (b.requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= a.value[i];
      b.accumulate(g);
    }
  });
}

Var scale(const Var& x, float s) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= s;
  return make("scale", std::move(out), {x}, [s](Node& n) {
    Tensor g = n.grad;
    for (auto& v : g.data()) v *= s;
    push(*n.inputs[0], g);
  });
}

Var add_scalar(const Var& x, float s) {
  Tensor out = x.value();
  for (auto& v : out.data()) v += s;
  return make("add_scalar", std::move(out), {x}, [](Node& n) { push(*n.inputs[0], n.grad); });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return make("relu", std::move(out), {x}, [](Node& n) {
    Tensor g = n.grad;
    const Tensor& in = n.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(in[i] > 0.0f)) g[i] = 0.0f;
    push(*n.inputs[0], g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x.value();
  const int rows = xv.rows(), d = xv.cols();
  if (gamma.value().size() != static_cast<std::size_t>(d) || beta.value().size() != static_cast<std::size_t>(d)) {
    throw DimensionError("layer_norm: " + xv.shape_string() + " with gain " + gamma.value().shape_string());
  }
  Tensor xhat(xv.shape());
  std::vector<float> inv_std(static_cast<std::size_t>(rows));
  Tensor out(xv.shape());
  for (int r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= d;
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    auto xh = xhat.row(r);
    auto o = out.row(r);
    for (int c = 0; c < d; ++c) {
      xh[c] = static_cast<float>((in[c] - mean) * is);
      o[c] = gamma.value()[c] * xh[c] + beta.value()[c];
    }
  }
  return make("layer_norm", std::move(out), {x, gamma, beta},
              [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                Node& x = *n.inputs[0];
                Node& g = *n.inputs[1];
                Node& b = *n.inputs[2];
                const int rows = n.grad.rows(), d = n.grad.cols();
                if (g.requires_grad || b.requires_grad) {
                  Tensor dg(g.value.shape()), db(b.value.shape());
                  for (int r = 0; r < rows; ++r) {
                    auto dy = n.grad.row(r);
                    auto xh = xhat.row(r);
                    for (int c = 0; c < d; ++c) {
                      dg[c] += dy[c] * xh[c];
                      db[c] += dy[c];
                    }
                  }
                  push(g, dg);
                  push(b, db);
                }
                if (x.requires_grad) {
                  Tensor dx(x.value.shape());
                  for (int r = 0; r < rows; ++r) {
                    auto dy = n.grad.row(r);
                    auto xh = xhat.row(r);
                    double m1 = 0.0, m2 = 0.0;
                    for (int c = 0; c < d; ++c) {
                      const double dxh = static_cast<double>(dy[c]) * g.value[c];
                      m1 += dxh;
                      m2 += dxh * xh[c];
                    }
                    m1 /= d;
                    m2 /= d;
                    auto out = dx.row(r);
                    for (int c = 0; c < d; ++c) {
                      const double dxh = static_cast<double>(dy[c]) * g.value[c];
                      out[c] = static_cast<float>(inv_std[r] * (dxh - m1 - xh[c] * m2));
                    }
                  }
                  x.accumulate(dx);
                }
              });
}

Var softmax_rows(const Var& x) {
  Tensor out = ambs::softmax_rows(x.value());
  return make("softmax_rows", std::move(out), {x}, [](Node& n) {
    const Tensor& y = n.value;
    Tensor g(y.shape());
    for (int r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto dy = n.grad.row(r);
      double s = 0.0;
      for (int c = 0; c < y.cols(); ++c) s += static_cast<double>(dy[c]) * yr[c];
      auto gr = g.row(r);
      for (int c = 0; c < y.cols(); ++c) gr[c] = static_cast<float>(yr[c] * (dy[c] - s));
    }
    push(*n.inputs[0], g);
  });
}

Var causal_mask(const Var& scores) {
  const Tensor& s = scores.value();
  if (s.rank() != 2 || s.rows() != s.cols()) throw DimensionError("causal_mask: expected square scores, got " + s.shape_string());
  Tensor out = s;
  for (int i = 0; i < s.rows(); ++i)
    for (int j = i + 1; j < s.cols(); ++j) out.at(i, j) = kMaskValue;
  return make("causal_mask", std::move(out), {scores}, [](Node& n) {
    Tensor g = n.grad;
    for (int i = 0; i < g.rows(); ++i)
      for (int j = i + 1; j < g.cols(); ++j) g.at(i, j) = 0.0f;
    push(*n.inputs[0], g);
  });
}

Var mean_pool_rows(const Var& h) {
  Tensor out = ambs::mean_pool_rows(h.value());
  return make("mean_pool_rows", std::move(out), {h}, [](Node& n) {
    const Tensor& in = n.inputs[0]->value;
    Tensor g(in.shape());
    const float inv = 1.0f / static_cast<float>(in.rows());
    for (int r = 0; r < in.rows(); ++r) {
      auto row = g.row(r);
      for (int c = 0; c < in.cols(); ++c) row[c] = n.grad[c] * inv;
    }
    push(*n.inputs[0], g);
  });
}

Var cosine_similarity(const Var& a, const Var& b, float norm_floor) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.size() != bv.size()) throw DimensionError("cosine_similarity: " + av.shape_string() + " vs " + bv.shape_string());
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    ab += static_cast<double>(av[i]) * bv[i];
    aa += static_cast<double>(av[i]) * av[i];
    bb += static_cast<double>(bv[i]) * bv[i];
  }
  const double na_raw = std::sqrt(aa), nb_raw = std::sqrt(bb);
  if (norm_floor <= 0.0f && (na_raw == 0.0 || nb_raw == 0.0)) {
    throw DegenerateInputError("cosine_similarity: zero-norm argument");
  }
  const bool a_clamped = na_raw < norm_floor;
  const bool b_clamped = nb_raw < norm_floor;
  const double na = a_clamped ? norm_floor : na_raw;
  const double nb = b_clamped ? norm_floor : nb_raw;
  const double cosv = ab / (na * nb);
  Tensor out = Tensor::vector({static_cast<float>(cosv)});
  return make("cosine_similarity", std::move(out), {a, b},
              [=](Node& n) {
                const double go = n.grad[0];
                Node& a = *n.inputs[0];
                Node& b = *n.inputs[1];
                auto grad_for = [&](const Tensor& self, const Tensor& other, double self_norm, bool clamped) {
                  Tensor g(self.shape());
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    double v = other[i] / (na * nb);
                    if (!clamped) v -= cosv * self[i] / (self_norm * self_norm);
                    g[i] = static_cast<float>(go * v);
                  }
                  return g;
                };
                if (a.requires_grad) a.accumulate(grad_for(a.value, b.value, na, a_clamped));
                if (b.requires_grad) b.accumulate(grad_for(b.value, a.value, nb, b_clamped));
              });
}

Var cosine_loss(const Var& a, const Var& b, float norm_floor) {
  return add_scalar(scale(cosine_similarity(a, b, norm_floor), -1.0f), 1.0f);
}

Var mean_row_cosine_loss(const Var& y, const Tensor& t, float norm_floor) {
  const Tensor& yv = y.value();
  if (!yv.same_shape(t) || yv.rank() != 2) {
    throw DimensionError("mean_row_cosine_loss: " + yv.shape_string() + " vs " + t.shape_string());
  }
  const int m = yv.rows(), k = yv.cols();
  std::vector<double> ny(m), nt(m), cosv(m);
  std::vector<char> clamped(m);
  double total = 0.0;
  for (int r = 0; r < m; ++r) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (int c = 0; c < k; ++c) {
      ab += static_cast<double>(yv.at(r, c)) * t.at(r, c);
      aa += static_cast<double>(yv.at(r, c)) * yv.at(r, c);
      bb += static_cast<double>(t.at(r, c)) * t.at(r, c);
    }
    clamped[r] = std::sqrt(aa) < norm_floor;
    ny[r] = std::max(std::sqrt(aa), static_cast<double>(norm_floor));
    nt[r] = std::max(std::sqrt(bb), static_cast<double>(norm_floor));
    cosv[r] = ab / (ny[r] * nt[r]);
    total += 1.0 - cosv[r];
  }
  Tensor out = Tensor::vector({static_cast<float>(total / m)});
  return make("mean_row_cosine_loss", std::move(out), {y}, [=](Node& n) {
    const Tensor& yv = n.inputs[0]->value;
    const double go = -static_cast<double>(n.grad[0]) / m;
    Tensor g(yv.shape());
    for (int r = 0; r < m; ++r) {
      for (int c = 0; c < k; ++c) {
        double v = t.at(r, c) / (ny[r] * nt[r]);
        if (!clamped[r]) v -= cosv[r] * yv.at(r, c) / (ny[r] * ny[r]);
        g.at(r, c) = static_cast<float>(go * v);
      }
    }
    push(*n.inputs[0], g);
  });
}

Var dropout(const Var& x, float p, std::uint64_t seed, bool train) {
  if (!train || p <= 0.0f) return x;
  if (p >= 1.0f) throw ContractError("dropout: p must be < 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const float keep_scale = 1.0f / (1.0f - p);
  Tensor mask(x.value().shape());
  for (auto& m : mask.data()) m = u(rng) >= p ? keep_scale : 0.0f;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make("dropout", std::move(out), {x}, [mask = std::move(mask)](Node& n) {
    Tensor g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
    push(*n.inputs[0], g);
  });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& w = table.value();
  if (w.rank() != 2) throw DimensionError("embedding: table must be a matrix, got " + w.shape_string());
  const int d = w.cols();
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor out({static_cast<int>(idv.size()), d});
  for (std::size_t t = 0; t < idv.size(); ++t) {
    if (idv[t] < 0 || idv[t] >= w.rows()) {
      throw VocabularyError("embedding: id " + std::to_string(idv[t]) + " at position " + std::to_string(t) +
                            " outside vocabulary of " + std::to_string(w.rows()));
    }
    auto src = w.row(idv[t]);
    std::copy(src.begin(), src.end(), out.row(static_cast<int>(t)).begin());
  }
  return make("embedding", std::move(out), {table}, [idv = std::move(idv)](Node& n) {
    Node& w = *n.inputs[0];
    Tensor& g = w.grad_buffer();
    for (std::size_t t = 0; t < idv.size(); ++t) {
      auto src = n.grad.row(static_cast<int>(t));
      auto dst = g.row(idv[t]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (float v : x.value().data()) s += v;
  return make("sum", Tensor::vector({static_cast<float>(s)}), {x}, [](Node& n) {
    push(*n.inputs[0], Tensor::filled(n.inputs[0]->value.shape(), n.grad[0]));
  });
}

Var transpose(const Var& x) {
  return make("transpose", ambs::transpose(x.value()), {x},
              [](Node& n) { push(*n.inputs[0], ambs::transpose(n.grad)); });
}

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out(std::move(shape), x.value().data());
  return make("reshape", std::move(out), {x}, [](Node& n) {
    push(*n.inputs[0], Tensor(n.inputs[0]->value.shape(), n.grad.data()));
  });
}

Var slice_cols(const Var& x, int begin, int end) {
  const Tensor& v = x.value();
  if (v.rank() != 2 || begin < 0 || end > v.cols() || begin >= end) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + v.shape_string());
  }
  Tensor out({v.rows(), end - begin});
  for (int r = 0; r < v.rows(); ++r)
    for (int c = begin; c < end; ++c) out.at(r, c - begin) = v.at(r, c);
  return make("slice_cols", std::move(out), {x}, [begin, end](Node& n) {
    Node& in = *n.inputs[0];
    Tensor& g = in.grad_buffer();
    for (int r = 0; r < n.grad.rows(); ++r)
      for (int c = begin; c < end; ++c) g.at(r, c) += n.grad.at(r, c - begin);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const int rows = parts[0].value().rows();
  int cols = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      throw DimensionError("concat_cols: " + parts[0].value().shape_string() + " vs " + p.value().shape_string());
    }
    offsets.push_back(cols);
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < v.cols(); ++c) out.at(r, offsets[i] + c) = v.at(r, c);
  }
  return make("concat_cols", std::move(out), parts, [offsets](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      Node& in = *n.inputs[i];
      if (!in.requires_grad) continue;
      Tensor g(in.value.shape());
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < g.cols(); ++c) g.at(r, c) = n.grad.at(r, offsets[i] + c);
      in.accumulate(g);
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const Tensor& z = logits.value();
  if (static_cast<int>(targets.size()) != z.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + z.shape_string());
  }
  Tensor probs = ambs::softmax_rows(z);
  std::vector<int> tv(targets.begin(), targets.end());
  double loss = 0.0;
  int count = 0;
  for (int r = 0; r < z.rows(); ++r) {
    if (tv[r] < 0) continue;
    if (tv[r] >= z.cols()) throw VocabularyError("cross_entropy: target " + std::to_string(tv[r]) + " out of range");
    loss -= std::log(std::max(static_cast<double>(probs.at(r, tv[r])), 1e-30));
    ++count;
  }
  if (count == 0) throw DegenerateInputError("cross_entropy: no target rows");
  loss /= count;
  return make("cross_entropy", Tensor::vector({static_cast<float>(loss)}), {logits},
              [probs = std::move(probs), tv = std::move(tv), count](Node& n) {
                Tensor g(probs.shape());
                const float s = n.grad[0] / static_cast<float>(count);
                for (int r = 0; r < g.rows(); ++r) {
                  if (tv[r] < 0) continue;
                  auto pr = probs.row(r);
                  auto gr = g.row(r);
                  for (int c = 0; c < g.cols(); ++c) gr[c] = pr[c] * s;
                  gr[tv[r]] -= s;
                }
                push(*n.inputs[0], g);
              });
}

void backward(const Var& root) {
  if (!root) throw ContractError("backward: null root");
  if (root.value().size() != 1) throw ContractError("backward: root must be scalar, got " + root.value().shape_string());
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion depth limits.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->is_leaf()) n->grad = Tensor(n->value.shape());
  root.node()->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

}  // namespace ambs::ag
