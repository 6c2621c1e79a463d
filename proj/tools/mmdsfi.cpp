// mmdsfi: instrument / verify / disasm / run / monitor / corpus front end.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmdsfi/corpus.hpp"
#include "mmdsfi/instrument.hpp"
#include "mmdsfi/runtime.hpp"
#include "mmdsfi/sasm.hpp"
#include "mmdsfi/verifier.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmdsfi;

namespace {

int fail(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return 1;
}

std::optional<std::string> slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) return std::nullopt;
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::variant<sasm::SasmProgram, std::string> parse_file(const std::string& path) {
  auto text = slurp(path);
  if (!text) return "cannot read " + path;
  auto r = sasm::parse_sasm(*text);
  if (auto* e = std::get_if<sasm::ParseError>(&r))
    return path + ":" + std::to_string(e->line) + ": " +
           sasm::parse_error_name(e->kind) + ": " + e->detail;
  return std::get<sasm::SasmProgram>(r);
}

json violations_json(const std::vector<verifier::Violation>& vs) {
  json arr = json::array();
  for (auto& v : vs)
    arr.push_back({{"stage", v.stage},
                   {"offset", v.offset},
                   {"code", v.code},
                   {"detail", v.detail}});
  return arr;
}

int cmd_instrument(const std::string& in, const std::string& out,
                   const instrument::Options& opts, bool raw) {
  auto parsed = parse_file(in);
  if (auto* e = std::get_if<std::string>(&parsed)) return fail(*e);
  auto& prog = std::get<sasm::SasmProgram>(parsed);
  auto r = raw ? instrument::assemble_raw(prog, opts) : instrument::instrument(prog, opts);
  if (auto* e = std::get_if<instrument::InstrumentError>(&r))
    return fail(e->code + ": " + e->detail);
  auto& img = std::get<image::SipbImage>(r);
  if (auto e = image::write_image_file(img, out)) return fail(e->detail);
  std::cout << out << ": code " << img.code.size() << " bytes, data "
            << img.data.size() << " bytes, entry " << img.entry << "\n";
  return 0;
}

int cmd_verify(const std::string& in, bool confine_loads, bool as_json) {
  auto r = image::read_image_file(in);
  if (auto* e = std::get_if<image::FormatError>(&r))
    return fail(std::string(image::format_error_name(e->kind)) + ": " + e->detail);
  auto verdict =
      verifier::verify(std::get<image::SipbImage>(r), verifier::Policy{confine_loads});
  if (as_json) {
    json j = {{"accepted", verdict.accepted},
              {"violations", violations_json(verdict.violations)},
              {"stats",
               {{"reachable", verdict.stats.reachable_count},
                {"cfi_labels", verdict.stats.cfi_label_count},
                {"mem_guards", verdict.stats.mem_guard_count},
                {"cfi_guards", verdict.stats.cfi_guard_count}}}};
    std::cout << j.dump(2) << "\n";
  } else if (verdict.accepted) {
    std::cout << "ACCEPTED: " << verdict.stats.reachable_count
              << " reachable instructions, " << verdict.stats.cfi_label_count
              << " labels, " << verdict.stats.mem_guard_count << " mem guards\n";
  } else {
    for (auto& v : verdict.violations)
      std::cout << "stage " << v.stage << " @" << v.offset << " " << v.code << ": "
                << v.detail << "\n";
    std::cout << "REJECTED (" << verdict.violations.size() << " violations)\n";
  }
  return verdict.accepted ? 0 : 1;
}

int cmd_disasm(const std::string& in) {
  auto r = image::read_image_file(in);
  if (auto* e = std::get_if<image::FormatError>(&r))
    return fail(std::string(image::format_error_name(e->kind)) + ": " + e->detail);
  auto& img = std::get<image::SipbImage>(r);
  auto s1 = verifier::stage1_disassemble(img);
  if (auto* v = std::get_if<verifier::Violation>(&s1))
    return fail("stage 1 " + v->code + " at offset " + std::to_string(v->offset));
  auto& reach = std::get<analysis::ReachableSet>(s1);
  for (auto& [off, ins] : reach.instrs) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06llx", (unsigned long long)off);
    std::string bytes;
    for (uint8_t b : ins.raw) {
      char h[4];
      std::snprintf(h, sizeof h, "%02x ", b);
      bytes += h;
    }
    bytes.resize(33, ' ');
    std::string mark = reach.entry_labels.count(off) ? "L " : "  ";
    std::cout << buf << "  " << mark << bytes << isa::to_string(ins) << "\n";
  }
  return 0;
}

int cmd_run(const std::string& in, const std::vector<std::string>& spawnable,
            bool permissive, bool monitored, uint64_t max_steps) {
  auto r = image::read_image_file(in);
  if (auto* e = std::get_if<image::FormatError>(&r))
    return fail(std::string(image::format_error_name(e->kind)) + ": " + e->detail);
  runtime::Sandbox sb;
  for (auto& path : spawnable) {
    auto s = image::read_image_file(path);
    if (auto* e = std::get_if<image::FormatError>(&s))
      return fail(path + ": " + image::format_error_name(e->kind));
    sb.images.push_back(std::get<image::SipbImage>(s));
  }
  auto lr = sb.load(std::get<image::SipbImage>(r), permissive);
  if (auto* e = std::get_if<runtime::LoadError>(&lr)) {
    for (auto& v : e->violations)
      std::cerr << "stage " << v.stage << " @" << v.offset << " " << v.code << "\n";
    return fail(e->message);
  }
  int main_pid = std::get<int>(lr);
  auto rep = monitored ? sb.monitor_run(max_steps) : sb.run(max_steps);
  for (auto& p : sb.procs)
    if (!p.output.empty()) std::cout << p.output;
  if (monitored) {
    for (auto& rec : rep.trace) {
      std::cerr << "[pid " << rec.pid << "] syscall " << rec.num << "(" << rec.args[0]
                << ", " << rec.args[1] << ", " << rec.args[2] << ") = "
                << int64_t(rec.ret) << "\n";
    }
    for (auto& ev : sb.monitor_events)
      std::cerr << "MONITOR pid " << ev.pid << " @" << std::hex << ev.rip << std::dec
                << ": " << ev.what << "\n";
    std::cerr << rep.steps << " steps, " << rep.bnd_checks << " bound checks\n";
  }
  for (auto& f : rep.faults)
    std::cerr << "FAULT pid " << f.pid << " @" << std::hex << f.rip << std::dec << " "
              << runtime::fault_name(f.kind) << ": " << f.detail << "\n";
  if (rep.deadlock) std::cerr << "deadlock: every live process is blocked\n";
  if (rep.step_limit_hit) std::cerr << "step limit reached\n";
  if (!rep.faults.empty() || rep.deadlock || !sb.monitor_events.empty()) return 1;
  auto e = rep.exits.find(main_pid);
  return e == rep.exits.end() ? 1 : e->second;
}

int cmd_corpus(const std::string& dir) {
  fs::create_directories(fs::path(dir) / "benign");
  fs::create_directories(fs::path(dir) / "adversarial");
  json manifest;
  int bad = 0;
  for (auto& prog : corpus::benign_programs()) {
    fs::path src = fs::path(dir) / "benign" / (prog.name + ".sasm");
    std::ofstream(src) << prog.source;
    auto parsed = sasm::parse_sasm(prog.source);
    auto img = instrument::instrument(std::get<sasm::SasmProgram>(parsed), {});
    std::string status = "ok";
    if (auto* e = std::get_if<instrument::InstrumentError>(&img)) {
      status = e->code;
      bad++;
    } else {
      fs::path out = fs::path(dir) / "benign" / (prog.name + ".sipb");
      image::write_image_file(std::get<image::SipbImage>(img), out.string());
      auto verdict = verifier::verify(std::get<image::SipbImage>(img));
      if (!verdict.accepted) {
        status = verdict.violations.front().code;
        bad++;
      }
    }
    manifest["benign"].push_back({{"name", prog.name}, {"status", status}});
  }
  for (auto& adv : corpus::adversarial_cases()) {
    fs::path out = fs::path(dir) / "adversarial" / (adv.name + ".sipb");
    std::ofstream f(out, std::ios::binary);
    f.write(reinterpret_cast<const char*>(adv.bytes.data()),
            std::streamsize(adv.bytes.size()));
    std::string got = corpus::check_image_bytes(adv.bytes);
    if (got != adv.expected_code) bad++;
    manifest["adversarial"].push_back(
        {{"name", adv.name}, {"expected", adv.expected_code}, {"got", got}});
  }
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
  std::cout << "corpus written to " << dir << " ("
            << corpus::benign_programs().size() << " benign, "
            << corpus::adversarial_cases().size() << " adversarial)\n";
  if (bad) std::cout << bad << " cases off-expectation\n";
  return bad ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-domain software fault isolation toolkit"};
  app.require_subcommand(1);

  std::string in, out = "out.sipb", dir = "corpus_out";
  std::vector<std::string> spawnable;
  bool no_confine = false, no_opt = false, raw = false, as_json = false,
       permissive = false;
  uint64_t d_capacity = 0, stack_reserve = 16384, max_steps = 10'000'000;

  auto* ci = app.add_subcommand("instrument", "compile and instrument a program");
  ci->add_option("input", in)->required();
  ci->add_option("-o,--output", out);
  ci->add_flag("--no-confine-loads", no_confine, "leave loads unchecked");
  ci->add_flag("--no-optimize", no_opt, "keep every inserted check");
  ci->add_flag("--raw", raw, "assemble without instrumentation (reference runs)");
  ci->add_option("--d-capacity", d_capacity);
  ci->add_option("--stack-reserve", stack_reserve);

  auto* cv = app.add_subcommand("verify", "statically verify an image");
  cv->add_option("input", in)->required();
  cv->add_flag("--no-confine-loads", no_confine);
  cv->add_flag("--json", as_json);

  auto* cd = app.add_subcommand("disasm", "list the reachable instructions");
  cd->add_option("input", in)->required();

  auto* cr = app.add_subcommand("run", "load and execute an image");
  cr->add_option("input", in)->required();
  cr->add_option("--spawn", spawnable, "images available to the spawn syscall");
  cr->add_flag("--permissive", permissive, "skip verification and policies");
  cr->add_option("--max-steps", max_steps);

  auto* cm = app.add_subcommand("monitor", "run with per-step policy checks");
  cm->add_option("input", in)->required();
  cm->add_option("--spawn", spawnable);
  cm->add_flag("--permissive", permissive);
  cm->add_option("--max-steps", max_steps);

  auto* cc = app.add_subcommand("corpus", "emit the built-in program corpus");
  cc->add_option("-o,--output", dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  instrument::Options opts;
  opts.confine_loads = !no_confine;
  opts.optimize = !no_opt;
  opts.d_capacity = d_capacity;
  opts.stack_reserve = stack_reserve;

  if (ci->parsed()) return cmd_instrument(in, out, opts, raw);
  if (cv->parsed()) return cmd_verify(in, !no_confine, as_json);
  if (cd->parsed()) return cmd_disasm(in);
  if (cr->parsed()) return cmd_run(in, spawnable, permissive, false, max_steps);
  if (cm->parsed()) return cmd_run(in, spawnable, permissive, true, max_steps);
  if (cc->parsed()) return cmd_corpus(dir);
  return 2;
}
