#ifndef AACORD_EXPR_HPP
#define AACORD_EXPR_HPP

/** \file expr.hpp
    \brief Scalar expression trees: parsing, evaluation, exact symbolic
           differentiation, and compilation to a flat register program.

    Expressions are immutable after construction and safe to evaluate from
    many threads at once. The function set is fixed: sin, cos, tan, exp,
    log, sqrt, atan2. Exponents of `^` must be constant (integer or real);
    this keeps powers single-valued and differentiation elementary.
*/

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace aacord {

/// Parse failure; `offset` is the 1-based character position in the input.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at character " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const { return offset_; }
private:
    std::size_t offset_;
};

/// Evaluation failure: unbound variable or a domain violation
/// (log of a nonpositive value, division by zero, 0^negative, ...).
/// Domain violations always surface as errors, never as silent NaN.
class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Func : std::uint8_t { Sin, Cos, Tan, Exp, Log, Sqrt, Atan2 };

inline const char* func_name(Func f) {
    switch (f) {
        case Func::Sin:   return "sin";
        case Func::Cos:   return "cos";
        case Func::Tan:   return "tan";
        case Func::Exp:   return "exp";
        case Func::Log:   return "log";
        case Func::Sqrt:  return "sqrt";
        case Func::Atan2: return "atan2";
    }
    return "?";
}

/** Immutable scalar expression tree.

    Node kinds: real constant, named variable, unary negation, the binary
    operators + - * / ^, and application of one of the fixed functions.
    Copies share structure (shallow, reference-counted). */
class Expr {
public:
    enum class Kind : std::uint8_t { Constant, Variable, Neg, Add, Sub, Mul, Div, Pow, Call };

    Expr() = default;   ///< empty handle; only valid as a target of assignment

    static Expr constant(double v) {
        auto n = std::make_shared<Node>();
        n->kind = Kind::Constant;
        n->value = v;
        return Expr(std::move(n));
    }
    static Expr variable(std::string name) {
        auto n = std::make_shared<Node>();
        n->kind = Kind::Variable;
        n->name = std::move(name);
        return Expr(std::move(n));
    }
    static Expr neg(Expr a) { return make(Kind::Neg, {std::move(a)}); }
    static Expr add(Expr a, Expr b) { return make(Kind::Add, {std::move(a), std::move(b)}); }
    static Expr sub(Expr a, Expr b) { return make(Kind::Sub, {std::move(a), std::move(b)}); }
    static Expr mul(Expr a, Expr b) { return make(Kind::Mul, {std::move(a), std::move(b)}); }
    static Expr div(Expr a, Expr b) { return make(Kind::Div, {std::move(a), std::move(b)}); }
    static Expr pow(Expr base, Expr exponent) {
        return make(Kind::Pow, {std::move(base), std::move(exponent)});
    }
    static Expr call(Func f, std::vector<Expr> args) {
        auto n = std::make_shared<Node>();
        n->kind = Kind::Call;
        n->fn = f;
        n->args = std::move(args);
        return Expr(std::move(n));
    }

    bool valid() const { return node_ != nullptr; }
    Kind kind() const { return node().kind; }
    double value() const { return node().value; }          ///< Constant only
    const std::string& name() const { return node().name; } ///< Variable only
    Func fn() const { return node().fn; }                   ///< Call only
    const std::vector<Expr>& args() const { return node().args; }
    const Expr& arg(std::size_t i) const { return node().args[i]; }

    bool is_constant(double v) const {
        return valid() && kind() == Kind::Constant && value() == v;
    }

    /// Collect the distinct variable names appearing in the tree (in first-use order).
    std::vector<std::string> variables() const {
        std::vector<std::string> out;
        collect_variables(out);
        return out;
    }

    bool depends_on(std::string_view var) const {
        switch (kind()) {
            case Kind::Constant: return false;
            case Kind::Variable: return name() == var;
            default:
                for (const auto& a : args())
                    if (a.depends_on(var)) return true;
                return false;
        }
    }

private:
    struct Node {
        Kind kind = Kind::Constant;
        double value = 0.0;
        std::string name;
        Func fn = Func::Sin;
        std::vector<Expr> args;
    };

    explicit Expr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}

    static Expr make(Kind k, std::vector<Expr> args) {
        auto n = std::make_shared<Node>();
        n->kind = k;
        n->args = std::move(args);
        return Expr(std::move(n));
    }

    const Node& node() const {
        if (!node_) throw std::logic_error("use of empty Expr");
        return *node_;
    }

    void collect_variables(std::vector<std::string>& out) const {
        if (kind() == Kind::Variable) {
            for (const auto& v : out)
                if (v == name()) return;
            out.push_back(name());
            return;
        }
        for (const auto& a : node().args) a.collect_variables(out);
    }

    std::shared_ptr<const Node> node_;
};

/// Structural equality (same shape, same constants bit-for-bit, same names).
inline bool structurally_equal(const Expr& a, const Expr& b) {
    if (a.kind() != b.kind()) return false;
    switch (a.kind()) {
        case Expr::Kind::Constant:
            // bit comparison so that -0.0 and 0.0 count as different prints
            return a.value() == b.value() &&
                   std::signbit(a.value()) == std::signbit(b.value());
        case Expr::Kind::Variable: return a.name() == b.name();
        case Expr::Kind::Call:
            if (a.fn() != b.fn()) return false;
            [[fallthrough]];
        default: {
            if (a.args().size() != b.args().size()) return false;
            for (std::size_t i = 0; i < a.args().size(); ++i)
                if (!structurally_equal(a.arg(i), b.arg(i))) return false;
            return true;
        }
    }
}

// ---------------------------------------------------------------------------
// Bindings
// ---------------------------------------------------------------------------

/// Ordered list of (identifier, value) pairs; duplicate identifiers rejected.
class Bindings {
public:
    Bindings() = default;
    Bindings(std::initializer_list<std::pair<std::string, double>> init) {
        for (auto& kv : init) set(kv.first, kv.second);
    }

    void set(const std::string& name, double value) {
        for (auto& kv : pairs_)
            if (kv.first == name)
                throw std::invalid_argument("duplicate binding for '" + name + "'");
        pairs_.emplace_back(name, value);
    }

    const double* find(std::string_view name) const {
        for (const auto& kv : pairs_)
            if (kv.first == name) return &kv.second;
        return nullptr;
    }

    const std::vector<std::pair<std::string, double>>& pairs() const { return pairs_; }

private:
    std::vector<std::pair<std::string, double>> pairs_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_integral_value(double v) {
    return std::isfinite(v) && v == std::nearbyint(v) && std::abs(v) < 1e15;
}

inline double checked_pow(double base, double expo) {
    if (base == 0.0 && expo < 0.0)
        throw EvalError("domain error: 0 raised to a negative power");
    if (base < 0.0 && !is_integral_value(expo))
        throw EvalError("domain error: negative base with non-integer exponent");
    double r = std::pow(base, expo);
    if (!std::isfinite(r)) throw EvalError("non-finite result in pow");
    return r;
}

inline double checked_div(double a, double b) {
    if (b == 0.0) throw EvalError("domain error: division by zero");
    double r = a / b;
    if (!std::isfinite(r)) throw EvalError("non-finite result in division");
    return r;
}

inline double apply_func(Func f, double x, double y) {
    double r;
    switch (f) {
        case Func::Sin:  r = std::sin(x); break;
        case Func::Cos:  r = std::cos(x); break;
        case Func::Tan:  r = std::tan(x); break;
        case Func::Exp:  r = std::exp(x); break;
        case Func::Log:
            if (x <= 0.0) throw EvalError("domain error: log of nonpositive value");
            r = std::log(x); break;
        case Func::Sqrt:
            if (x < 0.0) throw EvalError("domain error: sqrt of negative value");
            r = std::sqrt(x); break;
        case Func::Atan2: r = std::atan2(x, y); break;
        default: throw EvalError("unknown function");
    }
    if (!std::isfinite(r))
        throw EvalError(std::string("non-finite result in ") + func_name(f));
    return r;
}

} // namespace detail

/// Tree-walking evaluation in IEEE double precision. Deterministic:
/// identical trees and bindings yield bit-identical results.
inline double eval(const Expr& e, const Bindings& b) {
    switch (e.kind()) {
        case Expr::Kind::Constant: return e.value();
        case Expr::Kind::Variable: {
            const double* v = b.find(e.name());
            if (!v) throw EvalError("unbound variable '" + e.name() + "'");
            return *v;
        }
        case Expr::Kind::Neg: return -eval(e.arg(0), b);
        case Expr::Kind::Add: return eval(e.arg(0), b) + eval(e.arg(1), b);
        case Expr::Kind::Sub: return eval(e.arg(0), b) - eval(e.arg(1), b);
        case Expr::Kind::Mul: return eval(e.arg(0), b) * eval(e.arg(1), b);
        case Expr::Kind::Div: return detail::checked_div(eval(e.arg(0), b), eval(e.arg(1), b));
        case Expr::Kind::Pow: return detail::checked_pow(eval(e.arg(0), b), eval(e.arg(1), b));
        case Expr::Kind::Call: {
            double x = eval(e.arg(0), b);
            double y = e.args().size() > 1 ? eval(e.arg(1), b) : 0.0;
            return detail::apply_func(e.fn(), x, y);
        }
    }
    throw EvalError("corrupt expression");
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace detail {

/** Recursive-descent parser.

    Precedence (tightest first): ^, unary -, * /, + -.
    Equal precedence associates left; parentheses override. The right
    operand of ^ must be a constant expression (sign and parentheses
    allowed), matching the Expr invariant. */
class Parser {
public:
    explicit Parser(std::string_view text) : text_(text) {}

    Expr parse() {
        skip_ws();
        if (pos_ >= text_.size()) throw ParseError("empty expression", 1);
        Expr e = parse_sum();
        skip_ws();
        if (pos_ < text_.size())
            throw ParseError(std::string("unexpected character '") + text_[pos_] + "'", pos_ + 1);
        return e;
    }

private:
    Expr parse_sum() {
        Expr lhs = parse_term();
        for (;;) {
            skip_ws();
            if (peek() == '+') { ++pos_; lhs = Expr::add(std::move(lhs), parse_term()); }
            else if (peek() == '-') { ++pos_; lhs = Expr::sub(std::move(lhs), parse_term()); }
            else return lhs;
        }
    }

    Expr parse_term() {
        Expr lhs = parse_unary();
        for (;;) {
            skip_ws();
            if (peek() == '*') { ++pos_; lhs = Expr::mul(std::move(lhs), parse_unary()); }
            else if (peek() == '/') { ++pos_; lhs = Expr::div(std::move(lhs), parse_unary()); }
            else return lhs;
        }
    }

    Expr parse_unary() {
        skip_ws();
        if (peek() == '-') { ++pos_; return negate(parse_unary()); }
        return parse_power();
    }

    // fold a sign applied to a literal constant, so "-2" and the printed
    // form "(-2)" parse to the same node
    static Expr negate(Expr e) {
        if (e.kind() == Expr::Kind::Constant) return Expr::constant(-e.value());
        return Expr::neg(std::move(e));
    }

    Expr parse_power() {
        Expr base = parse_atom();
        for (;;) {
            skip_ws();
            if (peek() != '^') return base;
            ++pos_;
            std::size_t expo_pos = pos_ + 1;
            Expr ex = parse_exponent_operand();
            if (!ex.variables().empty())
                throw ParseError("exponent of '^' must be a constant", expo_pos);
            base = Expr::pow(std::move(base), std::move(ex));
        }
    }

    // exponent operand: optional sign, then an atom ("x^-2", "x^(1/3)")
    Expr parse_exponent_operand() {
        skip_ws();
        if (peek() == '-') { ++pos_; return negate(parse_exponent_operand()); }
        return parse_atom();
    }

    Expr parse_atom() {
        skip_ws();
        if (pos_ >= text_.size())
            throw ParseError("unexpected end of expression", text_.size() + 1);
        char c = text_[pos_];
        if (c == '(') {
            ++pos_;
            Expr e = parse_sum();
            skip_ws();
            if (peek() != ')') throw ParseError("expected ')'", pos_ + 1);
            ++pos_;
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_ident();
        throw ParseError(std::string("unexpected character '") + c + "'", pos_ + 1);
    }

    Expr parse_number() {
        std::size_t start = pos_;
        while (pos_ < text_.size() &&
               (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.'))
            ++pos_;
        if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
            std::size_t mark = pos_++;
            if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-')) ++pos_;
            if (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_])))
                    ++pos_;
            } else {
                pos_ = mark;   // not an exponent suffix after all
            }
        }
        std::string tok(text_.substr(start, pos_ - start));
        try {
            std::size_t used = 0;
            double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return Expr::constant(v);
        } catch (const std::exception&) {
            throw ParseError("malformed number '" + tok + "'", start + 1);
        }
    }

    Expr parse_ident() {
        std::size_t start = pos_;
        while (pos_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
            ++pos_;
        std::string id(text_.substr(start, pos_ - start));
        skip_ws();
        if (peek() != '(') return Expr::variable(std::move(id));

        // function application
        Func fn;
        std::size_t arity = 1;
        if (id == "sin") fn = Func::Sin;
        else if (id == "cos") fn = Func::Cos;
        else if (id == "tan") fn = Func::Tan;
        else if (id == "exp") fn = Func::Exp;
        else if (id == "log") fn = Func::Log;
        else if (id == "sqrt") fn = Func::Sqrt;
        else if (id == "atan2") { fn = Func::Atan2; arity = 2; }
        else throw ParseError("unknown function '" + id + "'", start + 1);

        ++pos_;  // '('
        std::vector<Expr> args;
        args.push_back(parse_sum());
        while (args.size() < arity) {
            skip_ws();
            if (peek() != ',') throw ParseError("expected ','", pos_ + 1);
            ++pos_;
            args.push_back(parse_sum());
        }
        skip_ws();
        if (peek() != ')') throw ParseError("expected ')'", pos_ + 1);
        ++pos_;
        return Expr::call(fn, std::move(args));
    }

    char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_])))
            ++pos_;
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline Expr parse(std::string_view text) { return detail::Parser(text).parse(); }

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// precedence levels for the printer; higher binds tighter
inline int precedence(Expr::Kind k) {
    switch (k) {
        case Expr::Kind::Add:
        case Expr::Kind::Sub: return 1;
        case Expr::Kind::Mul:
        case Expr::Kind::Div: return 2;
        case Expr::Kind::Neg: return 3;
        case Expr::Kind::Pow: return 4;
        default: return 5;
    }
}

inline void print_rec(const Expr& e, std::string& out, int parent_prec, bool right_side) {
    int prec = precedence(e.kind());
    bool need_paren = prec < parent_prec ||
                      (prec == parent_prec && right_side && prec != 5);
    switch (e.kind()) {
        case Expr::Kind::Constant: {
            double v = e.value();
            if (v < 0 || std::signbit(v)) {
                // print negative constants parenthesized in operand position
                if (parent_prec > 1) { out += '('; out += format_double(v); out += ')'; }
                else out += format_double(v);
            } else out += format_double(v);
            return;
        }
        case Expr::Kind::Variable: out += e.name(); return;
        case Expr::Kind::Neg:
            if (need_paren) out += '(';
            out += '-';
            print_rec(e.arg(0), out, prec, true);
            if (need_paren) out += ')';
            return;
        case Expr::Kind::Call: {
            out += func_name(e.fn());
            out += '(';
            for (std::size_t i = 0; i < e.args().size(); ++i) {
                if (i) out += ", ";
                print_rec(e.arg(i), out, 0, false);
            }
            out += ')';
            return;
        }
        default: break;
    }
    const char* op = e.kind() == Expr::Kind::Add ? " + "
                   : e.kind() == Expr::Kind::Sub ? " - "
                   : e.kind() == Expr::Kind::Mul ? "*"
                   : e.kind() == Expr::Kind::Div ? "/" : "^";
    if (need_paren) out += '(';
    print_rec(e.arg(0), out, prec, false);
    out += op;
    print_rec(e.arg(1), out, prec, true);
    if (need_paren) out += ')';
}

} // namespace detail

/// Render the tree; `parse(to_string(e))` is structurally identical to `e`.
inline std::string to_string(const Expr& e) {
    std::string out;
    detail::print_rec(e, out, 0, false);
    return out;
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

namespace detail {

// smart constructors: constant folding plus the 0/1 identities, nothing more
inline Expr s_neg(const Expr& a) {
    if (a.kind() == Expr::Kind::Constant) return Expr::constant(-a.value());
    if (a.kind() == Expr::Kind::Neg) return a.arg(0);
    return Expr::neg(a);
}
inline Expr s_add(const Expr& a, const Expr& b) {
    if (a.kind() == Expr::Kind::Constant && b.kind() == Expr::Kind::Constant)
        return Expr::constant(a.value() + b.value());
    if (a.is_constant(0.0)) return b;
    if (b.is_constant(0.0)) return a;
    return Expr::add(a, b);
}
inline Expr s_sub(const Expr& a, const Expr& b) {
    if (a.kind() == Expr::Kind::Constant && b.kind() == Expr::Kind::Constant)
        return Expr::constant(a.value() - b.value());
    if (b.is_constant(0.0)) return a;
    if (a.is_constant(0.0)) return s_neg(b);
    return Expr::sub(a, b);
}
inline Expr s_mul(const Expr& a, const Expr& b) {
    if (a.kind() == Expr::Kind::Constant && b.kind() == Expr::Kind::Constant)
        return Expr::constant(a.value() * b.value());
    if (a.is_constant(0.0) || b.is_constant(0.0)) return Expr::constant(0.0);
    if (a.is_constant(1.0)) return b;
    if (b.is_constant(1.0)) return a;
    if (a.is_constant(-1.0)) return s_neg(b);
    if (b.is_constant(-1.0)) return s_neg(a);
    return Expr::mul(a, b);
}
inline Expr s_div(const Expr& a, const Expr& b) {
    if (a.is_constant(0.0)) return Expr::constant(0.0);
    if (b.is_constant(1.0)) return a;
    if (a.kind() == Expr::Kind::Constant && b.kind() == Expr::Kind::Constant &&
        b.value() != 0.0)
        return Expr::constant(a.value() / b.value());
    return Expr::div(a, b);
}
inline Expr s_pow(const Expr& a, double expo) {
    if (expo == 0.0) return Expr::constant(1.0);
    if (expo == 1.0) return a;
    // small positive integer exponents become repeated multiplication,
    // which keeps derivatives pow-free for polynomial inputs
    if (is_integral_value(expo) && expo > 1.0 && expo <= 4.0) {
        Expr r = a;
        for (int i = 1; i < static_cast<int>(expo); ++i) r = s_mul(r, a);
        return r;
    }
    return Expr::pow(a, Expr::constant(expo));
}

inline double constant_value_of(const Expr& e) {
    // exponent subtrees are constant by the parse invariant; fold them
    return eval(e, Bindings{});
}

} // namespace detail

/** Exact symbolic derivative with respect to `var`.

    Simplification is limited to constant folding and 0/1 identities; the
    result is correct, not minimal. Correctness is certified numerically
    against finite differences in the test suite. */
inline Expr differentiate(const Expr& e, const std::string& var) {
    using K = Expr::Kind;
    namespace d = detail;
    switch (e.kind()) {
        case K::Constant: return Expr::constant(0.0);
        case K::Variable: return Expr::constant(e.name() == var ? 1.0 : 0.0);
        case K::Neg: return d::s_neg(differentiate(e.arg(0), var));
        case K::Add: return d::s_add(differentiate(e.arg(0), var), differentiate(e.arg(1), var));
        case K::Sub: return d::s_sub(differentiate(e.arg(0), var), differentiate(e.arg(1), var));
        case K::Mul: {
            const Expr &u = e.arg(0), &v = e.arg(1);
            return d::s_add(d::s_mul(differentiate(u, var), v),
                            d::s_mul(u, differentiate(v, var)));
        }
        case K::Div: {
            const Expr &u = e.arg(0), &v = e.arg(1);
            Expr num = d::s_sub(d::s_mul(differentiate(u, var), v),
                                d::s_mul(u, differentiate(v, var)));
            return d::s_div(num, d::s_mul(v, v));
        }
        case K::Pow: {
            const Expr& u = e.arg(0);
            double c = d::constant_value_of(e.arg(1));
            // d(u^c) = c * u^(c-1) * u'
            return d::s_mul(d::s_mul(Expr::constant(c), d::s_pow(u, c - 1.0)),
                            differentiate(u, var));
        }
        case K::Call: {
            const Expr& u = e.arg(0);
            Expr du = differentiate(u, var);
            switch (e.fn()) {
                case Func::Sin: return d::s_mul(Expr::call(Func::Cos, {u}), du);
                case Func::Cos: return d::s_neg(d::s_mul(Expr::call(Func::Sin, {u}), du));
                case Func::Tan: {
                    Expr c = Expr::call(Func::Cos, {u});
                    return d::s_div(du, d::s_mul(c, c));
                }
                case Func::Exp: return d::s_mul(e, du);
                case Func::Log: return d::s_div(du, u);
                case Func::Sqrt:
                    return d::s_div(du, d::s_mul(Expr::constant(2.0), e));
                case Func::Atan2: {
                    // atan2(y, x): d = (x dy - y dx) / (x^2 + y^2)
                    const Expr& y = e.arg(0);
                    const Expr& x = e.arg(1);
                    Expr dy = du;
                    Expr dx = differentiate(x, var);
                    Expr num = d::s_sub(d::s_mul(x, dy), d::s_mul(y, dx));
                    Expr den = d::s_add(d::s_mul(x, x), d::s_mul(y, y));
                    return d::s_div(num, den);
                }
            }
            throw std::logic_error("unreachable");
        }
    }
    throw std::logic_error("unreachable");
}

/// Replace variables by expressions (used to pull base functions back
/// through the integral map: C(x) composed with x_i = H_i(z)).
inline Expr substitute(const Expr& e, const std::vector<std::pair<std::string, Expr>>& map) {
    switch (e.kind()) {
        case Expr::Kind::Constant: return e;
        case Expr::Kind::Variable:
            for (const auto& kv : map)
                if (kv.first == e.name()) return kv.second;
            return e;
        case Expr::Kind::Neg: return Expr::neg(substitute(e.arg(0), map));
        case Expr::Kind::Call: {
            std::vector<Expr> args;
            args.reserve(e.args().size());
            for (const Expr& a : e.args()) args.push_back(substitute(a, map));
            return Expr::call(e.fn(), std::move(args));
        }
        default: {
            Expr a = substitute(e.arg(0), map);
            Expr b = substitute(e.arg(1), map);
            switch (e.kind()) {
                case Expr::Kind::Add: return Expr::add(std::move(a), std::move(b));
                case Expr::Kind::Sub: return Expr::sub(std::move(a), std::move(b));
                case Expr::Kind::Mul: return Expr::mul(std::move(a), std::move(b));
                case Expr::Kind::Div: return Expr::div(std::move(a), std::move(b));
                default: return Expr::pow(std::move(a), std::move(b));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

/** Expression compiled to a flat register program over a fixed variable
    order. Evaluation takes the variable values positionally, avoiding name
    lookups in hot loops (vector-field evaluation inside ODE integration).

    Reentrant: evaluation uses only local storage. */
class CompiledExpr {
public:
    CompiledExpr() = default;

    CompiledExpr(const Expr& e, std::span<const std::string> variable_order) {
        compile(e, variable_order);
        if (n_regs_ > kStackRegs)
            throw std::logic_error("expression too large to compile");
    }

    double eval(std::span<const double> values) const {
        double regs[kStackRegs];
        for (const Instr& in : code_) {
            double r;
            switch (in.op) {
                case Op::Const: r = in.imm; break;
                case Op::Var:   r = values[static_cast<std::size_t>(in.a)]; break;
                case Op::Neg:   r = -regs[in.a]; break;
                case Op::Add:   r = regs[in.a] + regs[in.b]; break;
                case Op::Sub:   r = regs[in.a] - regs[in.b]; break;
                case Op::Mul:   r = regs[in.a] * regs[in.b]; break;
                case Op::Div:   r = detail::checked_div(regs[in.a], regs[in.b]); break;
                case Op::Pow:   r = detail::checked_pow(regs[in.a], in.imm); break;
                case Op::Call1: r = detail::apply_func(in.fn, regs[in.a], 0.0); break;
                case Op::Call2: r = detail::apply_func(in.fn, regs[in.a], regs[in.b]); break;
                default: throw EvalError("corrupt program");
            }
            if (!std::isfinite(r)) throw EvalError("non-finite intermediate value");
            regs[in.dst] = r;
        }
        return code_.empty() ? 0.0 : regs[code_.back().dst];
    }

    int register_count() const { return n_regs_; }

private:
    enum class Op : std::uint8_t { Const, Var, Neg, Add, Sub, Mul, Div, Pow, Call1, Call2 };
    struct Instr {
        Op op;
        Func fn = Func::Sin;
        std::int16_t dst = 0, a = 0, b = 0;
        double imm = 0.0;
    };
    static constexpr int kStackRegs = 512;

    void compile(const Expr& e, std::span<const std::string> vars) {
        n_regs_ = 1;
        emit(e, vars, 0);
    }

    // straightforward Ershov-free allocation: node at depth d -> register d;
    // right child evaluated into d+1
    int emit(const Expr& e, std::span<const std::string> vars, int depth) {
        if (depth + 2 > n_regs_) n_regs_ = depth + 2;
        auto at = [&](int d) { return static_cast<std::int16_t>(d); };
        using K = Expr::Kind;
        switch (e.kind()) {
            case K::Constant:
                code_.push_back({Op::Const, Func::Sin, at(depth), 0, 0, e.value()});
                return depth;
            case K::Variable: {
                int idx = -1;
                for (std::size_t i = 0; i < vars.size(); ++i)
                    if (vars[i] == e.name()) { idx = static_cast<int>(i); break; }
                if (idx < 0) throw EvalError("unbound variable '" + e.name() + "'");
                code_.push_back({Op::Var, Func::Sin, at(depth), at(idx), 0, 0.0});
                return depth;
            }
            case K::Neg:
                emit(e.arg(0), vars, depth);
                code_.push_back({Op::Neg, Func::Sin, at(depth), at(depth), 0, 0.0});
                return depth;
            case K::Pow: {
                emit(e.arg(0), vars, depth);
                double c = detail::constant_value_of(e.arg(1));
                code_.push_back({Op::Pow, Func::Sin, at(depth), at(depth), 0, c});
                return depth;
            }
            case K::Call: {
                emit(e.arg(0), vars, depth);
                if (e.args().size() > 1) {
                    emit(e.arg(1), vars, depth + 1);
                    code_.push_back({Op::Call2, e.fn(), at(depth), at(depth), at(depth + 1), 0.0});
                } else {
                    code_.push_back({Op::Call1, e.fn(), at(depth), at(depth), 0, 0.0});
                }
                return depth;
            }
            default: {
                emit(e.arg(0), vars, depth);
                emit(e.arg(1), vars, depth + 1);
                Op op = e.kind() == K::Add ? Op::Add
                      : e.kind() == K::Sub ? Op::Sub
                      : e.kind() == K::Mul ? Op::Mul : Op::Div;
                code_.push_back({op, Func::Sin, at(depth), at(depth), at(depth + 1), 0.0});
                return depth;
            }
        }
    }

    std::vector<Instr> code_;
    int n_regs_ = 0;
};

} // namespace aacord

#endif // AACORD_EXPR_HPP
