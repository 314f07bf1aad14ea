#pragma once

#include "sswm/numkit/graph.hpp"

namespace sswm::numkit {

// Complex values as paired real tensors. Gradients flow independently
// through the real and imaginary parts.
struct ComplexPair {
  Var re, im;
};

inline ComplexPair cadd(Graph& g, ComplexPair a, ComplexPair b) {
  return {g.add(a.re, b.re), g.add(a.im, b.im)};
}

inline ComplexPair csub(Graph& g, ComplexPair a, ComplexPair b) {
  return {g.sub(a.re, b.re), g.sub(a.im, b.im)};
}

inline ComplexPair cmul(Graph& g, ComplexPair a, ComplexPair b) {
  return {g.sub(g.mul(a.re, b.re), g.mul(a.im, b.im)),
          g.add(g.mul(a.re, b.im), g.mul(a.im, b.re))};
}

// complex * real
inline ComplexPair cscale(Graph& g, ComplexPair a, Var s) {
  return {g.mul(a.re, s), g.mul(a.im, s)};
}

inline ComplexPair cdiv(Graph& g, ComplexPair a, ComplexPair b) {
  Var mag = g.add(g.mul(b.re, b.re), g.mul(b.im, b.im));
  return {g.div(g.add(g.mul(a.re, b.re), g.mul(a.im, b.im)), mag),
          g.div(g.sub(g.mul(a.im, b.re), g.mul(a.re, b.im)), mag)};
}

inline Var take_real(ComplexPair a) { return a.re; }

}  // namespace sswm::numkit
