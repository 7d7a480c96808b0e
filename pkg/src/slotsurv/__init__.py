"""Slot-attention compression with sparse expert gating for multimodal
discrete-time survival prediction, on a self-contained numpy autodiff core."""

__version__ = "0.1.0"
