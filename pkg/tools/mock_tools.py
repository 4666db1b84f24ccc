"""
Scripted stand-in for the teacher endpoint, used for offline and CI runs.

A script is a JSON object:
  strategy        "overlap" (rank by shared query terms), "identity" or "reverse"
  status_sequence HTTP statuses returned before any successful response, e.g. [429, 429]
  responses       literal response texts returned in call order (overrides strategy)
  fence           wrap generated JSON in prose and a ```json fence
  report_usage    include a usage block so billed counts override estimates
  defects         {"duplicate_every": N, "drop_every": M} inject teacher defects
                  into every N-th / M-th prompt (by prompt hash, so replay is stable)
"""
import re
import json
import hashlib
import threading
from typing import Dict, Any, List, Optional, Tuple

from tools.bm25_tools import tokenize
from tools.teacher_tools import TransportResponse, approx_token_count

_PASSAGE_RE = re.compile(r"^\[(\d+)\] (.*)$")
_QUERY_RE = re.compile(r"^Search Query: (.*)\.$")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def load_script(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def read_prompt(prompt: str) -> Tuple[str, List[Tuple[int, str]]]:
    """Recover the query text and numbered passages from a rendered prompt."""
    query = ""
    passages: List[Tuple[int, str]] = []
    for line in prompt.splitlines():
        match = _PASSAGE_RE.match(line)
        if match:
            passages.append((int(match.group(1)), match.group(2)))
            continue
        match = _QUERY_RE.match(line)
        if match:
            query = match.group(1)
    return query, passages


def _best_sentence(text: str, query_terms: set) -> str:
    sentences = [s for s in _SENTENCE_RE.split(text) if s.strip()] or [text]
    return max(sentences, key=lambda s: len(query_terms & set(tokenize(s))))


class MockTransport:
    def __init__(self, script: Optional[Dict[str, Any]] = None):
        self.script = script or {}
        self.calls = 0
        self._lock = threading.Lock()
        self._statuses = list(self.script.get("status_sequence", []))
        self._responses = list(self.script.get("responses", []))

    @classmethod
    def from_file(cls, path: str) -> "MockTransport":
        return cls(load_script(path))

    def send(self, payload: Dict[str, Any]) -> TransportResponse:
        with self._lock:
            self.calls += 1
            if self._statuses:
                return TransportResponse(status=self._statuses.pop(0), body={"error": "scripted failure"})
            literal = self._responses.pop(0) if self._responses else None
        prompt = payload["messages"][-1]["content"]
        text = literal if literal is not None else self.respond(prompt)
        body: Dict[str, Any] = {"choices": [{"message": {"role": "assistant", "content": text}}]}
        if self.script.get("report_usage"):
            body["usage"] = {"prompt_tokens": approx_token_count(prompt), "completion_tokens": approx_token_count(text)}
        return TransportResponse(status=200, body=body)

    def respond(self, prompt: str) -> str:
        query, passages = read_prompt(prompt)
        query_terms = set(tokenize(query))
        overlap = {ident: len(query_terms & set(tokenize(text))) for ident, text in passages}
        strategy = self.script.get("strategy", "overlap")
        identifiers = [ident for ident, _ in passages]
        if strategy == "identity":
            order = identifiers
        elif strategy == "reverse":
            order = identifiers[::-1]
        else:
            order = sorted(identifiers, key=lambda i: (-overlap[i], i))

        texts = dict(passages)
        reasons: Dict[str, Dict[str, str]] = {}
        keywords: Dict[str, List[str]] = {}
        for position, ident in enumerate(order):
            shared = sorted(query_terms & set(tokenize(texts[ident])))
            keywords[str(ident)] = shared
            if shared:
                direct = f"The passage states: {_best_sentence(texts[ident], query_terms)}"
            else:
                direct = "The passage does not mention the query terms."
            if position + 1 < len(order):
                below = order[position + 1]
                listwise = (f"Passage [{ident}] covers {overlap[ident]} query terms compared with "
                            f"{overlap[below]} in passage [{below}], so it ranks above it.")
            else:
                listwise = f"Passage [{ident}] covers the fewest query terms and ranks last."
            reasons[str(ident)] = {"direct": direct, "listwise": listwise}

        order = self._inject_defects(order, prompt)
        text = json.dumps({"ranking": order, "reasons": reasons, "keywords": keywords}, ensure_ascii=False)
        if self.script.get("fence", False):
            text = f"Here is the ranking you asked for.\n```json\n{text}\n```\nLet me know if you need more detail."
        return text

    def _inject_defects(self, order: List[int], prompt: str) -> List[int]:
        defects = self.script.get("defects") or {}
        if len(order) < 3:
            return order
        seed = int(hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:8], 16)
        order = list(order)
        duplicate_every = defects.get("duplicate_every")
        if duplicate_every and seed % duplicate_every == 0:
            order.insert(2, order[0])
        drop_every = defects.get("drop_every")
        if drop_every and (seed // 7) % drop_every == 0:
            order.pop()
        return order
