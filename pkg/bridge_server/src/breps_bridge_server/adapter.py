"""Where a real promptable segmenter would plug in.

NOT part of the reference behavior or any conformance guarantee; the
protocol tests cover only the built-in analytic model. A real integration
replaces `RealSegmenterAdapter.evaluate` with a forward pass plus a
prompt-gradient (autograd through the box embedding), keeping the reply
schema identical.
"""

from __future__ import annotations


class RealSegmenterAdapter:
    """Skeleton adapter: load a checkpoint, answer eval requests."""

    def __init__(self, checkpoint_path: str):
        raise NotImplementedError(
            "bring your own segmenter: implement load + evaluate with the "
            "same reply fields (dice_loss, iou, grad[4])"
        )

    def evaluate(self, image_id: str, box: tuple[float, float, float, float]) -> dict:
        raise NotImplementedError
