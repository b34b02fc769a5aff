#include "dplc/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace dplc::ad {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<std::vector<Var>(const Var&)>;

Var make_node(Tensor value, std::vector<Var> parents, BackwardFn backward,
              const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a->value.shape) + " vs " +
                                shape_to_string(b->value.shape));
}

void check_rank2(const Var& a, const char* op) {
  if (a->value.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_to_string(a->value.shape));
}

Tensor map_unary(const Tensor& a, double (*f)(double)) {
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

Var embed_cols(const Var& a, std::int64_t start, std::int64_t total_cols);

}  // namespace

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->op = "const";
  return n;
}

Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad && g_grad_enabled;
  n->op = "leaf";
  return n;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b},
                   [](const Var& g) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b},
                   [](const Var& g) { return std::vector<Var>{g, neg(g)}; }, "sub");
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b},
                   [a, b](const Var& g) {
                     return std::vector<Var>{mul(g, b), mul(g, a)};
                   },
                   "mul");
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] / b->value[i];
  return make_node(std::move(out), {a, b},
                   [a, b](const Var& g) {
                     return std::vector<Var>{div(g, b),
                                             neg(div(mul(g, a), mul(b, b)))};
                   },
                   "div");
}

Var neg(const Var& a) {
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = -a->value[i];
  return make_node(std::move(out), {a},
                   [](const Var& g) { return std::vector<Var>{neg(g)}; }, "neg");
}

Var scale(const Var& a, double s) {
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
  return make_node(std::move(out), {a},
                   [s](const Var& g) { return std::vector<Var>{scale(g, s)}; },
                   "scale");
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
  return make_node(std::move(out), {a},
                   [](const Var& g) { return std::vector<Var>{g}; }, "add_scalar");
}

Var square(const Var& a) {
  Tensor out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * a->value[i];
  return make_node(std::move(out), {a},
                   [a](const Var& g) {
                     return std::vector<Var>{mul(g, scale(a, 2.0))};
                   },
                   "square");
}

Var sqrt_(const Var& a) {
  Tensor out = map_unary(a->value, [](double x) { return std::sqrt(x); });
  return make_node(std::move(out), {a},
                   [a](const Var& g) {
                     return std::vector<Var>{mul(g, scale(recip(sqrt_(a)), 0.5))};
                   },
                   "sqrt");
}

Var exp_(const Var& a) {
  Tensor out = map_unary(a->value, [](double x) { return std::exp(x); });
  return make_node(std::move(out), {a},
                   [a](const Var& g) { return std::vector<Var>{mul(g, exp_(a))}; },
                   "exp");
}

Var log_(const Var& a) {
  Tensor out = map_unary(a->value, [](double x) { return std::log(x); });
  return make_node(std::move(out), {a},
                   [a](const Var& g) { return std::vector<Var>{div(g, a)}; }, "log");
}

Var recip(const Var& a) {
  Tensor out = map_unary(a->value, [](double x) { return 1.0 / x; });
  return make_node(std::move(out), {a},
                   [a](const Var& g) {
                     return std::vector<Var>{neg(div(g, mul(a, a)))};
                   },
                   "recip");
}

Var tanh_(const Var& a) {
  Tensor out = map_unary(a->value, [](double x) { return std::tanh(x); });
  return make_node(std::move(out), {a},
                   [a](const Var& g) {
                     // d tanh = 1 - tanh^2, rebuilt from the input for
                     // second-order differentiation.
                     Var t = tanh_(a);
                     return std::vector<Var>{
                         mul(g, add_scalar(neg(square(t)), 1.0))};
                   },
                   "tanh");
}

Var relu(const Var& a) {
  Tensor out(a->value.shape);
  Tensor mask(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const bool pos = a->value[i] > 0.0;
    out[i] = pos ? a->value[i] : 0.0;
    mask[i] = pos ? 1.0 : 0.0;
  }
  return make_node(std::move(out), {a},
                   [mask](const Var& g) {
                     return std::vector<Var>{mul(g, constant(mask))};
                   },
                   "relu");
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out(a->value.shape);
  Tensor factor(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double f = a->value[i] > 0.0 ? 1.0 : slope;
    factor[i] = f;
    out[i] = f * a->value[i];
  }
  return make_node(std::move(out), {a},
                   [factor](const Var& g) {
                     return std::vector<Var>{mul(g, constant(factor))};
                   },
                   "leaky_relu");
}

Var matmul(const Var& a, const Var& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  if (a->value.shape[1] != b->value.shape[0])
    throw std::invalid_argument("matmul: inner dimensions disagree " +
                                shape_to_string(a->value.shape) + " x " +
                                shape_to_string(b->value.shape));
  Tensor out({a->value.shape[0], b->value.shape[1]});
  as_matrix(out) = as_matrix(a->value) * as_matrix(b->value);
  return make_node(std::move(out), {a, b},
                   [a, b](const Var& g) {
                     return std::vector<Var>{matmul(g, transpose(b)),
                                             matmul(transpose(a), g)};
                   },
                   "matmul");
}

Var transpose(const Var& a) {
  check_rank2(a, "transpose");
  Tensor out({a->value.shape[1], a->value.shape[0]});
  as_matrix(out) = as_matrix(a->value).transpose();
  return make_node(std::move(out), {a},
                   [](const Var& g) { return std::vector<Var>{transpose(g)}; },
                   "transpose");
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  const Shape in_shape = a->value.shape;
  const std::int64_t n = a->value.numel();
  return make_node(Tensor::scalar(s), {a},
                   [in_shape, n](const Var& g) {
                     Var wide = broadcast_cols(reshape(g, {1, 1}), n);
                     return std::vector<Var>{reshape(wide, in_shape)};
                   },
                   "sum_all");
}

Var mean_all(const Var& a) {
  const std::int64_t n = a->value.numel();
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var row_sum(const Var& a) {
  check_rank2(a, "row_sum");
  const std::int64_t n = a->value.shape[0], m = a->value.shape[1];
  Tensor out({n, 1});
  for (std::int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < m; ++c) s += a->value.at(r, c);
    out[r] = s;
  }
  return make_node(std::move(out), {a},
                   [m](const Var& g) {
                     return std::vector<Var>{broadcast_cols(g, m)};
                   },
                   "row_sum");
}

Var col_sum(const Var& a) {
  check_rank2(a, "col_sum");
  const std::int64_t n = a->value.shape[0], m = a->value.shape[1];
  Tensor out({1, m});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < m; ++c) out[c] += a->value.at(r, c);
  return make_node(std::move(out), {a},
                   [n](const Var& g) {
                     return std::vector<Var>{broadcast_rows(g, n)};
                   },
                   "col_sum");
}

Var broadcast_cols(const Var& a, std::int64_t m) {
  check_rank2(a, "broadcast_cols");
  if (a->value.shape[1] != 1)
    throw std::invalid_argument("broadcast_cols: expected (n,1) tensor");
  const std::int64_t n = a->value.shape[0];
  Tensor out({n, m});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < m; ++c) out.at(r, c) = a->value[r];
  return make_node(std::move(out), {a},
                   [](const Var& g) { return std::vector<Var>{row_sum(g)}; },
                   "broadcast_cols");
}

Var broadcast_rows(const Var& a, std::int64_t n) {
  check_rank2(a, "broadcast_rows");
  if (a->value.shape[0] != 1)
    throw std::invalid_argument("broadcast_rows: expected (1,m) tensor");
  const std::int64_t m = a->value.shape[1];
  Tensor out({n, m});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < m; ++c) out.at(r, c) = a->value[c];
  return make_node(std::move(out), {a},
                   [](const Var& g) { return std::vector<Var>{col_sum(g)}; },
                   "broadcast_rows");
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a->value.numel())
    throw std::invalid_argument("reshape: size mismatch " +
                                shape_to_string(a->value.shape) + " -> " +
                                shape_to_string(shape));
  Tensor out(shape, a->value.data);
  const Shape in_shape = a->value.shape;
  return make_node(std::move(out), {a},
                   [in_shape](const Var& g) {
                     return std::vector<Var>{reshape(g, in_shape)};
                   },
                   "reshape");
}

namespace {
Var embed_cols(const Var& a, std::int64_t start, std::int64_t total_cols) {
  check_rank2(a, "embed_cols");
  const std::int64_t n = a->value.shape[0], l = a->value.shape[1];
  Tensor out({n, total_cols});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < l; ++c) out.at(r, start + c) = a->value.at(r, c);
  return make_node(std::move(out), {a},
                   [start, l](const Var& g) {
                     return std::vector<Var>{slice_cols(g, start, l)};
                   },
                   "embed_cols");
}
}  // namespace

Var slice_cols(const Var& a, std::int64_t start, std::int64_t len) {
  check_rank2(a, "slice_cols");
  const std::int64_t n = a->value.shape[0], m = a->value.shape[1];
  if (start < 0 || len < 0 || start + len > m)
    throw std::invalid_argument("slice_cols: range out of bounds");
  Tensor out({n, len});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < len; ++c) out.at(r, c) = a->value.at(r, start + c);
  return make_node(std::move(out), {a},
                   [start, m](const Var& g) {
                     return std::vector<Var>{embed_cols(g, start, m)};
                   },
                   "slice_cols");
}

Var concat_cols(const Var& a, const Var& b) {
  check_rank2(a, "concat_cols");
  check_rank2(b, "concat_cols");
  if (a->value.shape[0] != b->value.shape[0])
    throw std::invalid_argument("concat_cols: row counts differ");
  const std::int64_t n = a->value.shape[0];
  const std::int64_t p = a->value.shape[1], q = b->value.shape[1];
  Tensor out({n, p + q});
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < p; ++c) out.at(r, c) = a->value.at(r, c);
    for (std::int64_t c = 0; c < q; ++c) out.at(r, p + c) = b->value.at(r, c);
  }
  return make_node(std::move(out), {a, b},
                   [p, q](const Var& g) {
                     return std::vector<Var>{slice_cols(g, 0, p),
                                             slice_cols(g, p, q)};
                   },
                   "concat_cols");
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape& sa = a->value.shape;
  const Shape& sb = b->value.shape;
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] ||
      sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: incompatible shapes " +
                                shape_to_string(sa) + " vs " + shape_to_string(sb));
  const std::int64_t bI = sa[0], rest = sa[2] * sa[3];
  Var fa = reshape(a, {bI, sa[1] * rest});
  Var fb = reshape(b, {bI, sb[1] * rest});
  return reshape(concat_cols(fa, fb), {bI, sa[1] + sb[1], sa[2], sa[3]});
}

Var gather(const Var& a, IndexMap idx, Shape out_shape) {
  if (static_cast<std::int64_t>(idx->size()) != shape_numel(out_shape))
    throw std::invalid_argument("gather: index map does not match output shape");
  Tensor out(out_shape);
  const std::int64_t n_in = a->value.numel();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::int64_t j = (*idx)[i];
    if (j >= 0) {
      if (j >= n_in) throw std::invalid_argument("gather: index out of range");
      out[static_cast<std::int64_t>(i)] = a->value[j];
    }
  }
  const Shape in_shape = a->value.shape;
  return make_node(std::move(out), {a},
                   [idx, in_shape](const Var& g) {
                     return std::vector<Var>{scatter_add(g, idx, in_shape)};
                   },
                   "gather");
}

Var scatter_add(const Var& a, IndexMap idx, Shape out_shape) {
  if (static_cast<std::int64_t>(idx->size()) != a->value.numel())
    throw std::invalid_argument("scatter_add: index map does not match input");
  Tensor out(out_shape);
  const std::int64_t n_out = out.numel();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::int64_t j = (*idx)[i];
    if (j >= 0) {
      if (j >= n_out) throw std::invalid_argument("scatter_add: index out of range");
      out[j] += a->value[static_cast<std::int64_t>(i)];
    }
  }
  const Shape in_shape = a->value.shape;
  return make_node(std::move(out), {a},
                   [idx, in_shape](const Var& g) {
                     return std::vector<Var>{gather(g, idx, in_shape)};
                   },
                   "scatter_add");
}

Var softmax_rows(const Var& logits) {
  check_rank2(logits, "softmax_rows");
  const std::int64_t n = logits->value.shape[0], m = logits->value.shape[1];
  // Row-max shift for stability; the shift is value-only and does not alter
  // the derivative.
  Tensor shift({n, 1});
  for (std::int64_t r = 0; r < n; ++r) {
    double mx = logits->value.at(r, 0);
    for (std::int64_t c = 1; c < m; ++c) mx = std::max(mx, logits->value.at(r, c));
    shift[r] = mx;
  }
  Var centered = sub(logits, broadcast_cols(constant(shift), m));
  Var e = exp_(centered);
  return div(e, broadcast_cols(row_sum(e), m));
}

Var row_norm(const Var& a) { return sqrt_(row_sum(square(a))); }

Var value_override(Tensor forward_value, const Var& grad_path) {
  if (!grad_path->value.same_shape(forward_value))
    throw std::invalid_argument("value_override: shape mismatch");
  return make_node(std::move(forward_value), {grad_path},
                   [](const Var& g) { return std::vector<Var>{g}; },
                   "value_override");
}

std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt,
                      bool create_graph) {
  if (output->value.numel() != 1)
    throw std::invalid_argument("grad: output must be scalar");

  // Reverse topological order over the differentiable subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (output->requires_grad) stack.push_back({output.get(), 0});
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0) {
      if (visited.count(node)) {
        stack.pop_back();
        continue;
      }
      visited.insert(node);
    }
    if (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !visited.count(p)) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Var> grads;
  grads[output.get()] = constant(Tensor::full(output->value.shape, 1.0));

  std::unique_ptr<NoGradGuard> guard;
  if (!create_graph) guard = std::make_unique<NoGradGuard>();

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto gi = grads.find(node);
    if (gi == grads.end() || !node->backward) continue;
    std::vector<Var> parent_grads = node->backward(gi->second);
    if (parent_grads.size() != node->parents.size())
      throw std::logic_error(std::string("backward arity mismatch in op ") + node->op);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (!p->requires_grad || !parent_grads[i]) continue;
      auto existing = grads.find(p);
      if (existing == grads.end())
        grads[p] = parent_grads[i];
      else
        existing->second = add(existing->second, parent_grads[i]);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto gi = grads.find(w.get());
    if (gi != grads.end())
      result.push_back(gi->second);
    else
      result.push_back(constant(Tensor::zeros(w->value.shape)));
  }
  return result;
}

}  // namespace dplc::ad
