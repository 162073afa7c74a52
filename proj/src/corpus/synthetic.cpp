// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/corpus/synthetic.hpp"

#include <array>
#include <functional>
#include <string_view>

#include "clinlm/common/rng.hpp"

namespace clinlm::corpus {
namespace {

constexpr std::array<std::string_view, 24> kSurnames = {
    "Smith",  "Johnson", "Williams", "Brown",  "Jones",   "Garcia", "Miller",  "Davis",
    "Rodriguez", "Martinez", "Hernandez", "Lopez", "Wilson", "Anderson", "Taylor", "Moore",
    "Jackson", "Martin", "Lee",      "Thompson", "White", "Harris",  "Clark",   "Lewis"};
constexpr std::array<std::string_view, 8> kStreets = {"Oak", "Maple", "Cedar", "Pine", "Elm", "Magnolia", "Cypress", "Willow"};
constexpr std::array<std::string_view, 6> kSuffixes = {"Street", "Avenue", "Road", "Lane", "Drive", "Court"};
constexpr std::array<std::string_view, 5> kCities = {"Gainesville", "Ocala", "Jacksonville", "Lake City", "Palatka"};
constexpr std::array<std::string_view, 12> kMonths = {"January", "February", "March",     "April",   "May",      "June",
                                                      "July",    "August",   "September", "October", "November", "December"};
constexpr std::array<std::string_view, 10> kFillers = {
    "Blood pressure was stable overnight.",     "No acute distress.",
    "Lungs clear to auscultation bilaterally.", "Continue current medications.",
    "Patient tolerated the procedure well.",    "Denies fever or chills.",
    "Pain controlled with oral analgesics.",    "Heart rate regular without murmur.",
    "Abdomen soft and nontender.",              "Will reassess in the morning."};

std::string digits(Rng& rng, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<char>('0' + (i == 0 ? 1 + rng.uniform_int(9) : rng.uniform_int(10)));
  return s;
}

std::string letters(Rng& rng, std::size_t n, std::string_view alphabet = "ABCDEFGHJKLMNPRSTUVWXYZ") {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[rng.uniform_int(alphabet.size())];
  return s;
}

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& a) {
  return a[rng.uniform_int(N)];
}

std::string pick(Rng& rng, std::span<const std::string_view> a) { return std::string(a[rng.uniform_int(a.size())]); }

std::string phone(Rng& rng) {
  std::string area = digits(rng, 3), mid = digits(rng, 3), last = digits(rng, 4);
  return rng.bernoulli(0.5) ? "(" + area + ") " + mid + "-" + last : area + "-" + mid + "-" + last;
}

struct Template {
  std::string_view before, after;
};

// One sentence template family: the value generator plus framing text.
struct Family {
  std::string_view category;
  std::vector<Template> templates;
  // Called with the chosen template index.
  std::function<std::string(Rng&, std::size_t)> value;
};

const std::vector<Family>& families() {
  static const std::vector<Family> fams = {
      {"NAME",
       {{"Seen by ", " in clinic today."}, {"Patient ", " reports intermittent chest pain."}, {"Discussed plan with ", " at bedside."}},
       [](Rng& r, std::size_t) { return pick(r, gazetteer_first_names()) + " " + std::string(pick(r, kSurnames)); }},
      {"ADDRESS",
       {{"Lives at ", "."}, {"Home address is ", " per intake."}},
       [](Rng& r, std::size_t) {
         return digits(r, 1 + r.uniform_int(4)) + " " + std::string(pick(r, kStreets)) + " " + std::string(pick(r, kSuffixes)) +
                ", " + std::string(pick(r, kCities)) + ", FL " + digits(r, 5);
       }},
      {"DATE",
       {{"Admitted on ", " for observation."}, {"Follow up scheduled for ", "."}},
       [](Rng& r, std::size_t) {
         std::string m = std::to_string(1 + r.uniform_int(12)), d = std::to_string(1 + r.uniform_int(28));
         std::string y = std::to_string(1990 + r.uniform_int(35));
         switch (r.uniform_int(3)) {
           case 0: return m + "/" + d + "/" + y;
           case 1: return y + "-" + (m.size() == 1 ? "0" + m : m) + "-" + (d.size() == 1 ? "0" + d : d);
           default: return std::string(pick(r, kMonths)) + " " + d + ", " + y;
         }
       }},
      {"PHONE", {{"Call ", " with questions."}, {"Contact number ", " on file."}}, [](Rng& r, std::size_t) { return phone(r); }},
      {"FAX", {{"Records sent to fax ", " today."}, {"Fax: ", " for the referring office."}}, [](Rng& r, std::size_t) { return phone(r); }},
      {"EMAIL",
       {{"Patient email ", " confirmed."}, {"Results sent to ", " per request."}},
       [](Rng& r, std::size_t) {
         std::string n(pick(r, kSurnames));
         for (auto& c : n) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
         return n + digits(r, 2) + "@example.org";
       }},
      {"SSN", {{"SSN ", " verified."}, {"Social security number ", " on the release form."}},
       [](Rng& r, std::size_t) { return digits(r, 3) + "-" + digits(r, 2) + "-" + digits(r, 4); }},
      {"MRN", {{"MRN ", " noted on chart."}, {"Medical record number: ", " confirmed."}}, [](Rng& r, std::size_t) { return digits(r, 8); }},
      {"HEALTH_PLAN", {{"Insurance member ID ", " active."}, {"Health plan number ", " on file."}},
       [](Rng& r, std::size_t) { return letters(r, 3) + digits(r, 9); }},
      {"ACCOUNT", {{"Billing account ", " updated."}, {"Account number ", " closed."}}, [](Rng& r, std::size_t) { return digits(r, 10); }},
      {"LICENSE", {{"Driver license ", " on file."}, {"DEA ", " listed for the prescriber."}},
       [](Rng& r, std::size_t) { return letters(r, 2) + digits(r, 7); }},
      {"VEHICLE", {{"Vehicle VIN ", " recorded after the accident."}, {"License plate ", " noted by EMS."}},
       [](Rng& r, std::size_t t) { return t == 0 ? letters(r, 17, "ABCDEFGHJKLMNPRSTUVWXYZ0123456789") : letters(r, 3) + "-" + digits(r, 4); }},
      {"DEVICE", {{"Pacemaker serial number ", " checked."}, {"Implant ID ", " logged."}},
       [](Rng& r, std::size_t) { return letters(r, 2) + "-" + digits(r, 7); }},
      {"URL", {{"See ", " for records."}, {"Portal link ", " shared."}},
       [](Rng& r, std::size_t) { return r.bernoulli(0.5) ? "https://portal.example.com/p/" + digits(r, 5) : "www.clinic" + digits(r, 2) + ".example.org"; }},
      {"IP", {{"Accessed from ", " yesterday."}, {"Login IP ", " flagged."}},
       [](Rng& r, std::size_t) {
         return std::to_string(r.uniform_int(256)) + "." + std::to_string(r.uniform_int(256)) + "." +
                std::to_string(r.uniform_int(256)) + "." + std::to_string(r.uniform_int(256));
       }},
      {"BIOMETRIC", {{"Fingerprint ID ", " enrolled."}, {"Voiceprint ", " captured at registration."}},
       [](Rng& r, std::size_t) { return "FP-" + letters(r, 8, "0123456789ABCDEF"); }},
      {"PHOTO", {{"Wound photo ", " uploaded."}, {"Image file ", " attached."}},
       [](Rng& r, std::size_t) { return "wound_" + digits(r, 4) + (r.bernoulli(0.5) ? ".jpg" : ".png"); }},
      {"OTHER_ID", {{"Study ID ", " assigned."}, {"Case number ", " opened."}},
       [](Rng& r, std::size_t) { return "NCT-" + digits(r, 6); }},
  };
  return fams;
}

}  // namespace

std::vector<SyntheticPhiDoc> synthetic_phi_corpus(std::size_t n_docs, std::uint64_t seed) {
  Rng rng(seed);
  const auto& fams = families();
  std::vector<SyntheticPhiDoc> out;
  std::size_t slot = 0;
  for (std::size_t d = 0; d < n_docs; ++d) {
    SyntheticPhiDoc doc;
    doc.doc.id = "phi-" + std::to_string(d);
    doc.doc.source_tag = "synthetic";
    std::string& text = doc.doc.text;
    std::size_t n_fill = 1 + rng.uniform_int(3);
    std::vector<int> kinds(3, 1);
    kinds.insert(kinds.end(), n_fill, 0);
    rng.shuffle(kinds);
    for (int kind : kinds) {
      if (!text.empty()) text += ' ';
      if (kind == 0) {
        text += pick(rng, kFillers);
        continue;
      }
      const auto& fam = fams[slot++ % fams.size()];
      std::size_t t = rng.uniform_int(fam.templates.size());
      const auto& tpl = fam.templates[t];
      std::string value = fam.value(rng, t);
      text += tpl.before;
      doc.gold.push_back({std::string(fam.category), text.size(), text.size() + value.size(), value});
      text += value;
      text += tpl.after;
    }
    out.push_back(std::move(doc));
  }
  return out;
}

std::map<std::string, CategoryRecall> phi_recall(std::span<const PhiSpan> gold, std::span<const PhiSpan> pred) {
  std::map<std::string, CategoryRecall> out;
  for (const auto& g : gold) {
    auto& c = out[g.category];
    ++c.gold;
    for (const auto& p : pred)
      if (p.category == g.category && p.start <= g.start && g.end <= p.end) {
        ++c.found;
        break;
      }
  }
  return out;
}

}  // namespace clinlm::corpus
