from .schema import (Annotation, CategorySpec, ImageRecord, LoadError, UniKPTDataset, dataset_from_dict,
                     load_coco_like, to_coco_dict)
from .synth import TEMPLATES, GenerationError, SynthScene, synth_dataset, synth_scene, write_synth_dataset
from .unify import RenameMap, UnifyError, sample_subset, standardize_orientation, unify

__all__ = [
    "Annotation", "CategorySpec", "ImageRecord", "LoadError", "UniKPTDataset", "dataset_from_dict",
    "load_coco_like", "to_coco_dict", "TEMPLATES", "GenerationError", "SynthScene", "synth_dataset",
    "synth_scene", "write_synth_dataset", "RenameMap", "UnifyError", "sample_subset",
    "standardize_orientation", "unify",
]
