"""Simulated storage stack: block device, journaling object store, checker."""

from .checker import CheckReport, Checker, Finding, audit_image, check_image
from .device import BLOCK_SIZE, BlockDevice, BlockIO, IoRecord, Recorder
from .layout import ImageView, Superblock, format_image
from .store import Store, open_ctree

__all__ = ["BLOCK_SIZE", "BlockDevice", "BlockIO", "CheckReport", "Checker", "Finding", "ImageView",
           "IoRecord", "Recorder", "Store", "Superblock", "audit_image", "check_image", "format_image",
           "open_ctree"]
