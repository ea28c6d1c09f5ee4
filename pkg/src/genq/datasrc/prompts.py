"""Label prompts for text-to-image generation."""
from __future__ import annotations

from dataclasses import dataclass

from genq import rng
from genq.errors import ContractError

TEMPLATES = (
    "photo of a {C}.",
    "rendering of a {C}.",
    "cropped photo of the {C}.",
    "the photo of a {C}.",
    "photo of a clean {C}.",
    "photo of a dirty {C}.",
    "dark photo of the {C}.",
    "photo of my {C}.",
    "photo of the cool {C}.",
    "close-up photo of a {C}.",
    "bright photo of the {C}.",
    "cropped photo of a {C}.",
    "photo of the {C}.",
    "good photo of the {C}.",
    "photo of one {C}.",
    "close-up photo of the {C}.",
    "rendition of the {C}.",
    "photo of the clean {C}.",
    "rendition of a {C}.",
    "photo of a nice {C}.",
    "good photo of a {C}.",
    "photo of the nice {C}.",
    "photo of the small {C}.",
    "photo of the weird {C}.",
    "photo of the large {C}.",
    "photo of a cool {C}.",
    "photo of a small {C}.",
)

STYLE_CLAUSE = " in the style of "


@dataclass(frozen=True)
class PromptSpec:
    class_name: str
    template_index: int
    style_token: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.class_name or not self.class_name.strip():
            raise ContractError("class name must be non-empty")
        if not 0 <= self.template_index < len(TEMPLATES):
            raise ContractError(f"template index {self.template_index} outside 0..{len(TEMPLATES) - 1}")
        if self.style_token is not None and not self.style_token.strip():
            raise ContractError("style token must be non-empty when given")


def build_prompt(spec: PromptSpec) -> str:
    """Render the template; a style token is appended after the template's full stop."""
    text = TEMPLATES[spec.template_index].replace("{C}", spec.class_name)
    if spec.style_token is not None:
        text += STYLE_CLAUSE + spec.style_token
    return text


def sample_prompt(class_name: str, seed: int, style_token: str | None = None) -> PromptSpec:
    index = int(rng.stream(seed, "prompt", class_name).integers(len(TEMPLATES)))
    return PromptSpec(class_name, index, style_token, seed)


def parse_prompt(text: str, class_names) -> tuple[int, str, str | None]:
    """Recover ``(template_index, class_name, style_token)`` from a rendered prompt."""
    style = None
    if STYLE_CLAUSE in text:
        text, style = text.split(STYLE_CLAUSE, 1)
    hits = [(i, c) for c in class_names for i, t in enumerate(TEMPLATES)
            if t.replace("{C}", c) == text]
    if len(hits) != 1:
        raise ContractError(f"prompt {text!r} matches {len(hits)} (template, class) pairs")
    return hits[0][0], hits[0][1], style
