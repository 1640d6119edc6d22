"""Learned backend: open-vocabulary detector plus box-prompted segmenter.

Weights load from local directories only (no hub downloads at serve
time); fine-tuned checkpoints slot in by path without code changes.
Inference runs in deterministic mode: eval(), no_grad(), fixed seed,
no test-time augmentation. Imports of torch/transformers happen lazily
so the classical backend works without them installed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class GroundedBackend:
    def __init__(self, detector_weights: str, segmenter_weights: str, device: str = "cpu"):
        import torch
        from transformers import (
            AutoProcessor,
            GroundingDinoForObjectDetection,
            SamModel,
            SamProcessor,
        )

        torch.manual_seed(0)
        self._torch = torch
        self.device = torch.device(device)
        self.det_processor = AutoProcessor.from_pretrained(
            detector_weights, local_files_only=True
        )
        self.detector = (
            GroundingDinoForObjectDetection.from_pretrained(
                detector_weights, local_files_only=True
            )
            .to(self.device)
            .eval()
        )
        self.seg_processor = SamProcessor.from_pretrained(
            segmenter_weights, local_files_only=True
        )
        self.segmenter = (
            SamModel.from_pretrained(segmenter_weights, local_files_only=True)
            .to(self.device)
            .eval()
        )
        self.detector_version = f"grounding-dino:{Path(detector_weights).name}"
        self.segmenter_version = f"sam:{Path(segmenter_weights).name}"

    def detect(
        self,
        image: np.ndarray,
        prompt: str,
        box_threshold: float,
        text_threshold: float,
    ) -> list[dict]:
        torch = self._torch
        pil = Image.fromarray(image)
        text = prompt if prompt.rstrip().endswith(".") else prompt.rstrip() + "."
        inputs = self.det_processor(images=pil, text=text, return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = self.detector(**inputs)
        result = self.det_processor.post_process_grounded_object_detection(
            outputs,
            inputs["input_ids"],
            box_threshold=box_threshold,
            text_threshold=text_threshold,
            target_sizes=[pil.size[::-1]],  # (height, width) of the source image
        )[0]
        detections = []
        for box, score, label in zip(result["boxes"], result["scores"], result["labels"]):
            x1, y1, x2, y2 = (float(v) for v in box.tolist())
            detections.append(
                {
                    "box": [x1, y1, x2, y2],
                    "score": float(score),
                    "phrase": str(label),
                }
            )
        detections.sort(key=lambda d: (-d["score"], d["box"][0], d["box"][1]))
        return detections

    def segment(self, image: np.ndarray, boxes) -> list[np.ndarray]:
        torch = self._torch
        pil = Image.fromarray(image)
        prompt_boxes = [[list(map(float, box)) for box in boxes]]
        inputs = self.seg_processor(pil, input_boxes=prompt_boxes, return_tensors="pt").to(
            self.device
        )
        with torch.no_grad():
            outputs = self.segmenter(**inputs, multimask_output=False)
        masks = self.seg_processor.image_processor.post_process_masks(
            outputs.pred_masks.cpu(),
            inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu(),
        )[0]
        return [masks[i, 0].numpy().astype(bool) for i in range(len(boxes))]
