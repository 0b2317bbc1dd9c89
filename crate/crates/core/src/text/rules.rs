//! Word tables behind class-name standardization and variant generation.

use crate::volume::Modality;

/// Whole-name aliases applied after the word-level rules.
pub(crate) const ALIASES: &[(&str, &str)] = &[
    ("myocardium", "heart"),
    ("cardiac muscle", "heart"),
    ("oesophagus", "esophagus"),
    ("gall bladder", "gallbladder"),
];

/// Organ noun and its adjective form.
pub(crate) const ADJECTIVES: &[(&str, &str)] = &[
    ("kidney", "renal"),
    ("liver", "hepatic"),
    ("lung", "pulmonary"),
    ("spleen", "splenic"),
    ("heart", "cardiac"),
    ("pancreas", "pancreatic"),
    ("stomach", "gastric"),
    ("brain", "cerebral"),
];

/// Words that may follow an organ adjective ("renal tumors").
pub(crate) const SUFFIXES: &[&str] = &[
    "lesion", "lesions", "tumor", "tumors", "tumour", "tumours", "nodule", "nodules", "cyst",
    "cysts", "structure", "structures",
];

pub(crate) const FILLER: &[&str] = &["structure", "structures"];

/// Singular or British spellings folded onto the canonical plural.
pub(crate) const PLURALS: &[(&str, &str)] = &[
    ("lesion", "lesions"),
    ("tumor", "tumors"),
    ("tumour", "tumors"),
    ("tumours", "tumors"),
    ("nodule", "nodules"),
    ("cyst", "cysts"),
];

/// Interchangeable lesion-type suffixes used to generate variants.
pub(crate) const LESION_FAMILY: &[&str] = &["lesions", "lesion", "tumors", "tumor", "tumours", "tumour"];

pub(crate) const DIRECTIONS: &[&str] = &["left", "right"];

/// Modality keywords in priority order: the first modality with a hit wins,
/// so "PET/CT" is PET and "MR angiography" is MRI. Matched as whole words on
/// the normalized sentence. "us" is deliberately absent: it collides with the
/// English pronoun.
pub(crate) const MODALITY_KEYWORDS: &[(Modality, &[&str])] = &[
    (
        Modality::PET,
        &["pet", "positron emission", "fdg", "psma", "suv"],
    ),
    (
        Modality::Microscopy,
        &[
            "microscopy",
            "microscopic",
            "micrograph",
            "histology",
            "histopathology",
            "fluorescence",
            "confocal",
        ],
    ),
    (
        Modality::US,
        &[
            "ultrasound",
            "ultrasonography",
            "ultrasonic",
            "sonography",
            "sonographic",
            "echocardiography",
            "echocardiogram",
            "doppler",
        ],
    ),
    (
        Modality::MRI,
        &[
            "mri",
            "mr",
            "magnetic resonance",
            "t1",
            "t2",
            "t1w",
            "t2w",
            "t1 weighted",
            "t2 weighted",
            "flair",
            "dwi",
            "adc",
            "cine",
        ],
    ),
    (
        Modality::CT,
        &["ct", "computed tomography", "cta", "cect", "ncct", "tomography"],
    ),
];
