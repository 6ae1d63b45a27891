"""DCDG semi-supervised segmentation with indirect double-sided adversarial adaptation."""
