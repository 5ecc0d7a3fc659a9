# Segmentation networks, losses, metrics and the adversarial trainer
