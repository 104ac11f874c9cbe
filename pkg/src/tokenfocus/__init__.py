"""Token-focused first-token scoring for image-text alignment evaluation."""
