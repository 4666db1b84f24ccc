import os
import logging
from enum import Enum
from functools import lru_cache
from typing import List, Dict, Tuple, Sequence, Optional

from pydantic import BaseModel, Field, model_validator

from tools.corpus_tools import Corpus, Query
from tools.bm25_tools import RankedList

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "prompts")
DEFAULT_WINDOW = 20
DEFAULT_STRIDE = 10
DEFAULT_PASSAGE_TOKENS = 120


class PromptMode(str, Enum):
    BASIC = "basic"
    EXPLICIT = "explicit"
    COMPARISON = "comparison"
    COMBINED = "combined"


# Instruction blocks per mode; the passages and the return block always follow.
MODE_BLOCKS: Dict[PromptMode, Tuple[str, ...]] = {
    PromptMode.BASIC: ("basic",),
    PromptMode.EXPLICIT: ("basic", "explicit"),
    PromptMode.COMPARISON: ("basic", "comparison"),
    PromptMode.COMBINED: ("basic", "explicit", "comparison"),
}


# --- Pydantic Models ---
class WindowPassage(BaseModel, frozen=True):
    identifier: int = Field(ge=1, description="1-based number shown to the teacher as [i].")
    doc_id: str
    text: str


class PassageWindow(BaseModel, frozen=True):
    query_id: str
    start: int = Field(ge=0, description="Offset of the first passage in the full candidate list.")
    passages: List[WindowPassage]

    @model_validator(mode="after")
    def _check_identifiers(self) -> "PassageWindow":
        identifiers = [p.identifier for p in self.passages]
        if identifiers != list(range(1, len(identifiers) + 1)):
            raise ValueError("window identifiers must be 1..n in order")
        return self

    def __len__(self) -> int:
        return len(self.passages)

    @property
    def end(self) -> int:
        return self.start + len(self.passages)

    def doc_ids(self) -> List[str]:
        return [p.doc_id for p in self.passages]

    def doc_for(self, identifier: int) -> str:
        return self.passages[identifier - 1].doc_id


@lru_cache(maxsize=8)
def load_templates(directory: str = TEMPLATE_DIR) -> Dict[str, str]:
    templates = {}
    for name in ("basic", "explicit", "comparison", "return_type", "schema_hint"):
        with open(os.path.join(directory, f"{name}.txt"), "r", encoding="utf-8") as f:
            templates[name] = f.read().rstrip("\n")
    logging.debug(f"Loaded prompt templates from {directory}")
    return templates


def truncate_passage(text: str, max_tokens: int = DEFAULT_PASSAGE_TOKENS) -> str:
    tokens = text.split()
    return " ".join(tokens[:max_tokens])


def _fill(template: str, num: int, query: str) -> str:
    # plain replacement: templates may contain literal JSON braces
    return template.replace("{num}", str(num)).replace("{query}", query)


def build_prompt(
    query: Query,
    window: PassageWindow,
    mode: PromptMode,
    schema_hint: bool = False,
    template_dir: str = TEMPLATE_DIR,
) -> str:
    if not window.passages:
        raise ValueError("cannot build a prompt for an empty window")
    templates = load_templates(template_dir)
    num = len(window)
    sections = [_fill(templates[name], num, query.text) for name in MODE_BLOCKS[PromptMode(mode)]]
    sections.append("\n".join(f"[{p.identifier}] {p.text}" for p in window.passages))
    sections.append(_fill(templates["return_type"], num, query.text))
    if schema_hint:
        sections.append(templates["schema_hint"])
    return "\n\n".join(sections) + "\n"


def window_spans(list_length: int, window_size: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> List[Tuple[int, int]]:
    """[start, end) offsets, back-to-front, consecutive windows overlapping by window_size - stride."""
    if window_size < 2:
        raise ValueError(f"window_size must be >= 2, got {window_size}")
    if not 1 <= stride <= window_size:
        raise ValueError(f"stride must be in 1..{window_size}, got {stride}")
    spans: List[Tuple[int, int]] = []
    end = list_length
    while end > 0:
        start = max(0, end - window_size)
        spans.append((start, end))
        if start == 0:
            break
        end -= stride
    return spans


def make_window(query_id: str, doc_ids: Sequence[str], start: int, end: int, corpus: Corpus,
                max_tokens: int = DEFAULT_PASSAGE_TOKENS) -> PassageWindow:
    passages = [
        WindowPassage(identifier=i, doc_id=doc_id, text=truncate_passage(corpus.get(doc_id).text, max_tokens))
        for i, doc_id in enumerate(doc_ids[start:end], start=1)
    ]
    return PassageWindow(query_id=query_id, start=start, passages=passages)


def window_passages(
    ranked_list: RankedList,
    corpus: Corpus,
    window_size: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
    max_tokens: int = DEFAULT_PASSAGE_TOKENS,
    doc_order: Optional[Sequence[str]] = None,
) -> List[PassageWindow]:
    """Windows over the candidate list in emission (back-to-front) order.

    doc_order overrides the ranked list's order, which is how a caller builds the
    next window from a partially reranked working list.
    """
    doc_ids = list(doc_order) if doc_order is not None else ranked_list.doc_ids()
    return [
        make_window(ranked_list.query_id, doc_ids, start, end, corpus, max_tokens)
        for start, end in window_spans(len(doc_ids), window_size, stride)
    ]
