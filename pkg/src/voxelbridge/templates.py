"""Static instruction template assets, one list per task kind.

The localization template carries an ``<object>`` slot that is substituted
with the concept string.
"""

BRIEF_INSTRUCTIONS = (
    "Describe the image concisely.",
    "Provide a brief description of the given image.",
    "Offer a succinct explanation of the picture presented.",
    "Summarize the visual content of the image.",
    "Provide a brief description of the image.",
    "Describe the image briefly.",
    "Summarize the image.",
    "Give a short and clear explanation of the subsequent image.",
    "Share a concise interpretation of the image provided.",
    "Present a compact description of the photo's key features.",
    "Relay a brief, clear account of the picture shown.",
    "Render a clear and concise summary of the photo.",
    "Write a terse but informative summary of the picture.",
    "Create a compact narrative representing the image presented.",
)

DETAILED_INSTRUCTIONS = (
    "Describe the following image in detail.",
    "Provide a detailed description of the given image.",
    "Give an elaborate explanation of the image you see.",
    "Share a comprehensive rundown of the presented image.",
    "Offer a detailed description of the image.",
    "Describe the image in detail.",
    "Offer a thorough analysis of the image.",
    "Provide a detailed explanation of the subsequent image.",
    "Explain the various aspects of the image before you.",
    "Clarify the contents of the displayed image with great detail.",
    "Characterize the image using a well-detailed description.",
    "Break down the elements of the image in a detailed manner.",
    "Walk through the important details of the image.",
    "Portray the image with a rich, descriptive narrative.",
    "Narrate the contents of the image with precision.",
    "Analyze the image in a comprehensive and detailed manner.",
    "Illustrate the image through a descriptive explanation.",
    "Explain the image in detail.",
    "Examine the image closely and share its details.",
    "Write an exhaustive depiction of the given image.",
)

RECONSTRUCTION_INSTRUCTIONS = (
    "Provide the corresponding Stable Diffusion prompts for the image.",
)

LOCALIZATION_INSTRUCTIONS = (
    'Locating the concept of "<object>"',
)

TEMPLATES_BY_KIND = {
    "brief": BRIEF_INSTRUCTIONS,
    "detailed": DETAILED_INSTRUCTIONS,
    "recon_prompt": RECONSTRUCTION_INSTRUCTIONS,
    "concept_loc": LOCALIZATION_INSTRUCTIONS,
}

ALL_TEMPLATE_STRINGS = (
    BRIEF_INSTRUCTIONS + DETAILED_INSTRUCTIONS
    + RECONSTRUCTION_INSTRUCTIONS + LOCALIZATION_INSTRUCTIONS
)
