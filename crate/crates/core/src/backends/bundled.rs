// generated list of bundled prompt templates
pub(super) const BUNDLED: &[(&str, &str)] = &[
    ("image_cls_annotate_cot", include_str!("../../templates/image_cls_annotate_cot.txt")),
    ("image_cls_annotate_naive", include_str!("../../templates/image_cls_annotate_naive.txt")),
    ("image_cls_criticize_cot", include_str!("../../templates/image_cls_criticize_cot.txt")),
    ("image_cls_criticize_cot_logit", include_str!("../../templates/image_cls_criticize_cot_logit.txt")),
    ("image_cls_criticize_devil", include_str!("../../templates/image_cls_criticize_devil.txt")),
    ("image_cls_criticize_mc", include_str!("../../templates/image_cls_criticize_mc.txt")),
    ("image_cls_criticize_naive", include_str!("../../templates/image_cls_criticize_naive.txt")),
    ("image_cls_criticize_naive_logit", include_str!("../../templates/image_cls_criticize_naive_logit.txt")),
    ("text_cls_annotate_cot", include_str!("../../templates/text_cls_annotate_cot.txt")),
    ("text_cls_annotate_naive", include_str!("../../templates/text_cls_annotate_naive.txt")),
    ("text_cls_criticize_cot", include_str!("../../templates/text_cls_criticize_cot.txt")),
    ("text_cls_criticize_cot_logit", include_str!("../../templates/text_cls_criticize_cot_logit.txt")),
    ("text_cls_criticize_devil", include_str!("../../templates/text_cls_criticize_devil.txt")),
    ("text_cls_criticize_mc", include_str!("../../templates/text_cls_criticize_mc.txt")),
    ("text_cls_criticize_naive", include_str!("../../templates/text_cls_criticize_naive.txt")),
    ("text_cls_criticize_naive_logit", include_str!("../../templates/text_cls_criticize_naive_logit.txt")),
    ("vqa_annotate_cot", include_str!("../../templates/vqa_annotate_cot.txt")),
    ("vqa_annotate_naive", include_str!("../../templates/vqa_annotate_naive.txt")),
    ("vqa_criticize_cot", include_str!("../../templates/vqa_criticize_cot.txt")),
    ("vqa_criticize_cot_logit", include_str!("../../templates/vqa_criticize_cot_logit.txt")),
    ("vqa_criticize_devil", include_str!("../../templates/vqa_criticize_devil.txt")),
    ("vqa_criticize_mc", include_str!("../../templates/vqa_criticize_mc.txt")),
    ("vqa_criticize_naive", include_str!("../../templates/vqa_criticize_naive.txt")),
    ("vqa_criticize_naive_logit", include_str!("../../templates/vqa_criticize_naive_logit.txt")),
];
