"""Candidate image sources: prompts, an HTTP generation client, procedural synthesis, files."""
from genq.datasrc.dataset import CLASS_NAMES, Dataset, load_dataset, save_dataset
from genq.datasrc.external import (DEFAULT_GUIDANCE, GenRequest, area_resize, generate_external,
                                   generate_pool)
from genq.datasrc.prompts import TEMPLATES, PromptSpec, build_prompt, parse_prompt, sample_prompt
from genq.datasrc.synth import corrupt, synth_dataset, synth_images

__all__ = [
    "CLASS_NAMES", "DEFAULT_GUIDANCE", "Dataset", "GenRequest", "PromptSpec", "TEMPLATES",
    "area_resize", "build_prompt", "corrupt", "generate_external", "generate_pool",
    "load_dataset", "parse_prompt", "sample_prompt", "save_dataset", "synth_dataset",
    "synth_images",
]
