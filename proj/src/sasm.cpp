#include "mmdsfi/sasm.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

namespace mmdsfi::sasm {

namespace {

const std::set<std::string> kMnemonics = {
    "mov", "lea", "add", "sub", "and", "or", "xor", "cmp",
    "push", "pop", "jmp", "je", "jne", "jl", "jge", "call",
    "ret", "nop", "syscall",
};

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_ident(const std::string& s) {
  if (s.empty()) return false;
  if (!std::isalpha(uint8_t(s[0])) && s[0] != '_') return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(uint8_t(c)) || c == '_';
  });
}

std::optional<int64_t> parse_int(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    size_t pos = 0;
    long long v = std::stoll(s, &pos, 0);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (...) {
    return std::nullopt;
  }
}

struct OperandParser {
  int line;
  std::optional<ParseError> error;

  std::optional<Operand> parse(const std::string& tok) {
    Operand op;
    if (tok.empty()) return fail(ParseErrorKind::SyntaxError, "empty operand");
    if (auto r = isa::reg_from_name(tok)) {
      if (*r == isa::Reg::r10 || *r == isa::Reg::r11)
        return fail(ParseErrorKind::ReservedRegister,
                    std::string(isa::reg_name(*r)) + " is reserved");
      op.kind = OperandKind::Reg;
      op.reg = *r;
      return op;
    }
    if (tok[0] == '&') {
      std::string name = tok.substr(1);
      if (!is_ident(name)) return fail(ParseErrorKind::SyntaxError, "bad label in " + tok);
      op.kind = OperandKind::AddrOf;
      op.label = name;
      return op;
    }
    if (tok[0] == '[') {
      if (tok.back() != ']') return fail(ParseErrorKind::SyntaxError, "unterminated " + tok);
      auto mem = parse_mem(tok.substr(1, tok.size() - 2));
      if (!mem) return std::nullopt;
      op.kind = OperandKind::Mem;
      op.mem = *mem;
      return op;
    }
    if (auto v = parse_int(tok)) {
      op.kind = OperandKind::Imm;
      op.imm = *v;
      return op;
    }
    if (is_ident(tok)) {
      op.kind = OperandKind::Label;
      op.label = tok;
      return op;
    }
    return fail(ParseErrorKind::SyntaxError, "bad operand " + tok);
  }

  std::optional<MemExpr> parse_mem(const std::string& body) {
    // base [+ index*scale] [+/- disp]
    MemExpr m;
    std::vector<std::pair<char, std::string>> terms;
    size_t start = 0;
    char sign = '+';
    for (size_t i = 0; i <= body.size(); i++) {
      if (i == body.size() || body[i] == '+' || (body[i] == '-' && i > start)) {
        terms.emplace_back(sign, trim(body.substr(start, i - start)));
        if (i < body.size()) sign = body[i];
        start = i + 1;
      }
    }
    for (auto& [sg, t] : terms) {
      if (t.empty()) { fail(ParseErrorKind::SyntaxError, "bad memory operand"); return std::nullopt; }
      size_t star = t.find('*');
      if (star != std::string::npos) {
        auto idx = isa::reg_from_name(trim(t.substr(0, star)));
        auto sc = parse_int(trim(t.substr(star + 1)));
        if (!idx || !sc || (*sc != 1 && *sc != 2 && *sc != 4 && *sc != 8) ||
            sg == '-' || m.index) {
          fail(ParseErrorKind::SyntaxError, "bad index term " + t);
          return std::nullopt;
        }
        if (*idx == isa::Reg::r10 || *idx == isa::Reg::r11) {
          fail(ParseErrorKind::ReservedRegister, "reserved register in memory operand");
          return std::nullopt;
        }
        m.index = *idx;
        m.scale = uint8_t(*sc);
        continue;
      }
      if (auto r = isa::reg_from_name(t)) {
        if (*r == isa::Reg::r10 || *r == isa::Reg::r11) {
          fail(ParseErrorKind::ReservedRegister, "reserved register in memory operand");
          return std::nullopt;
        }
        if (sg == '-' || (m.base && m.index)) {
          fail(ParseErrorKind::SyntaxError, "bad memory operand");
          return std::nullopt;
        }
        if (!m.base) m.base = *r;
        else { m.index = *r; m.scale = 1; }
        continue;
      }
      if (auto v = parse_int(t)) {
        m.disp += sg == '-' ? -*v : *v;
        continue;
      }
      fail(ParseErrorKind::SyntaxError, "bad memory term " + t);
      return std::nullopt;
    }
    if (!m.base) {
      fail(ParseErrorKind::SyntaxError, "memory operand needs a base register");
      return std::nullopt;
    }
    return m;
  }

  std::optional<Operand> fail(ParseErrorKind k, const std::string& d) {
    if (!error) error = ParseError{k, line, d};
    return std::nullopt;
  }
};

std::vector<std::string> split_operands(const std::string& s) {
  std::vector<std::string> out;
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '[') depth++;
    if (c == ']') depth--;
    if (c == ',' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

}  // namespace

const char* parse_error_name(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::SyntaxError: return "SyntaxError";
    case ParseErrorKind::UnknownMnemonic: return "UnknownMnemonic";
    case ParseErrorKind::ReservedRegister: return "ReservedRegister";
    case ParseErrorKind::DuplicateLabel: return "DuplicateLabel";
    case ParseErrorKind::UndefinedLabel: return "UndefinedLabel";
  }
  return "?";
}

std::variant<SasmProgram, ParseError> parse_sasm(const std::string& text) {
  SasmProgram prog;
  std::set<std::string> defined;
  std::vector<std::pair<std::string, int>> referenced;  // label, line
  Function* cur = nullptr;

  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    lineno++;
    size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    std::string line = trim(raw);
    if (line.empty()) continue;

    if (line.rfind("func ", 0) == 0) {
      std::string name = trim(line.substr(5));
      if (name.empty() || name.back() != ':')
        return ParseError{ParseErrorKind::SyntaxError, lineno, "expected `func NAME:`"};
      name = trim(name.substr(0, name.size() - 1));
      if (!is_ident(name))
        return ParseError{ParseErrorKind::SyntaxError, lineno, "bad function name"};
      if (!defined.insert(name).second)
        return ParseError{ParseErrorKind::DuplicateLabel, lineno, name};
      prog.functions.push_back(Function{name, {}, lineno});
      cur = &prog.functions.back();
      continue;
    }
    if (line.rfind(".data ", 0) == 0) {
      std::string rest = trim(line.substr(6));
      size_t colon = rest.find(':');
      if (colon == std::string::npos)
        return ParseError{ParseErrorKind::SyntaxError, lineno, "expected `.data NAME: ...`"};
      std::string name = trim(rest.substr(0, colon));
      if (!is_ident(name))
        return ParseError{ParseErrorKind::SyntaxError, lineno, "bad data name"};
      if (!defined.insert(name).second)
        return ParseError{ParseErrorKind::DuplicateLabel, lineno, name};
      std::string spec = trim(rest.substr(colon + 1));
      DataBlob blob{name, {}, {}};
      if (spec.rfind("quad", 0) == 0) {
        for (auto& tok : split_operands(trim(spec.substr(4)))) {
          if (!tok.empty() && tok[0] == '&') {
            std::string lbl = tok.substr(1);
            if (!is_ident(lbl))
              return ParseError{ParseErrorKind::SyntaxError, lineno, "bad label " + tok};
            blob.addr_refs.emplace_back(blob.bytes.size(), lbl);
            referenced.emplace_back(lbl, lineno);
            blob.bytes.insert(blob.bytes.end(), 8, 0);
            continue;
          }
          auto v = parse_int(tok);
          if (!v) return ParseError{ParseErrorKind::SyntaxError, lineno, "bad quad " + tok};
          for (int i = 0; i < 8; i++) blob.bytes.push_back(uint8_t(uint64_t(*v) >> (8 * i)));
        }
      } else if (spec.rfind("bytes", 0) == 0) {
        std::istringstream bs(spec.substr(5));
        std::string tok;
        while (bs >> tok) {
          if (!tok.empty() && tok.back() == ',') tok.pop_back();
          auto v = parse_int(tok);
          if (!v || *v < 0 || *v > 255)
            return ParseError{ParseErrorKind::SyntaxError, lineno, "bad byte " + tok};
          blob.bytes.push_back(uint8_t(*v));
        }
      } else {
        return ParseError{ParseErrorKind::SyntaxError, lineno, "expected quad or bytes"};
      }
      prog.data.push_back(std::move(blob));
      continue;
    }

    if (!cur)
      return ParseError{ParseErrorKind::SyntaxError, lineno, "instruction outside a function"};

    // label definition
    if (line.back() == ':' && is_ident(line.substr(0, line.size() - 1))) {
      std::string name = line.substr(0, line.size() - 1);
      if (!defined.insert(name).second)
        return ParseError{ParseErrorKind::DuplicateLabel, lineno, name};
      Item it;
      it.is_label = true;
      it.label = name;
      it.line = lineno;
      cur->body.push_back(std::move(it));
      continue;
    }

    size_t sp = line.find_first_of(" \t");
    std::string mn = sp == std::string::npos ? line : line.substr(0, sp);
    std::string rest = sp == std::string::npos ? "" : trim(line.substr(sp));
    if (!kMnemonics.count(mn))
      return ParseError{ParseErrorKind::UnknownMnemonic, lineno, mn};
    Item it;
    it.mn = mn;
    it.line = lineno;
    OperandParser op_parser{lineno, std::nullopt};
    if (!rest.empty()) {
      for (auto& tok : split_operands(rest)) {
        auto op = op_parser.parse(tok);
        if (!op) return *op_parser.error;
        if (op->kind == OperandKind::Label || op->kind == OperandKind::AddrOf)
          referenced.emplace_back(op->label, lineno);
        it.ops.push_back(*op);
      }
    }
    cur->body.push_back(std::move(it));
  }

  for (auto& [lbl, ln] : referenced)
    if (!defined.count(lbl))
      return ParseError{ParseErrorKind::UndefinedLabel, ln, lbl};

  if (prog.functions.empty())
    return ParseError{ParseErrorKind::SyntaxError, 0, "no functions"};
  prog.entry = prog.functions.front().name;
  for (auto& f : prog.functions)
    if (f.name == "main") prog.entry = "main";
  return prog;
}

}  // namespace mmdsfi::sasm
