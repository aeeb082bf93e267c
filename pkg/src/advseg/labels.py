"""Full label taxonomy: background plus the eight brain ROIs."""

BG, GM, B, WM, L, CSF, V, C, BS = range(9)
N_LABELS = 9

NAMES = ("BG", "GM", "B", "WM", "L", "CSF", "V", "C", "BS")
ROI_IDS = (GM, B, WM, L, CSF, V, C, BS)
ROI_NAMES = tuple(NAMES[i] for i in ROI_IDS)

# one fixed RGB colour per label, used for PPM renderings
PALETTE = (
    (0, 0, 0),        # BG
    (128, 128, 128),  # GM
    (255, 165, 0),    # B
    (255, 255, 255),  # WM
    (255, 0, 0),      # L
    (0, 0, 255),      # CSF
    (0, 255, 255),    # V
    (0, 160, 0),      # C
    (255, 0, 255),    # BS
)
