"""Text-prompted multiscale segmentation."""
