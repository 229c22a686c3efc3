#include "parasol/ctl/config.hpp"

#include <gtest/gtest.h>

using namespace parasol;
using namespace parasol::ctl;

TEST(Config, ReferenceFileEqualsDefaults) {
    const auto ref = io::read_json(io::fs::path(PARASOL_SOURCE_DIR) / "configs" / "reference.json");
    EXPECT_EQ(load_config(io::fs::path(PARASOL_SOURCE_DIR) / "configs" / "reference.json"), default_config());
    EXPECT_EQ(ref, default_config());
}

TEST(Config, MergeValidatesKeysAndTypes) {
    EXPECT_THROW(merge_config({{"train", {{"stepz", 1}}}}), InvalidArgument);
    EXPECT_THROW(merge_config({{"bogus", 1}}), InvalidArgument);
    EXPECT_THROW(merge_config({{"train", {{"steps", 1.5}}}}), InvalidArgument);
    EXPECT_THROW(merge_config({{"train", {{"steps", "many"}}}}), InvalidArgument);
    EXPECT_THROW(merge_config({{"train", 3}}), InvalidArgument);
    const auto cfg = merge_config({{"train", {{"lr", 1}}}});
    EXPECT_TRUE(cfg["train"]["lr"].is_number_float());
    EXPECT_EQ(cfg["train"]["steps"], default_config()["train"]["steps"]);
}

TEST(Config, OverridePatchParsing) {
    EXPECT_EQ(override_patch("train.steps=500"), (json{{"train", {{"steps", 500}}}}));
    EXPECT_EQ(override_patch("corpus.mode=render"), (json{{"corpus", {{"mode", "render"}}}}));
    EXPECT_EQ(override_patch("sampler.clip_latents=false"), (json{{"sampler", {{"clip_latents", false}}}}));
    EXPECT_THROW(override_patch("train.steps"), InvalidArgument);
    EXPECT_THROW(override_patch("=3"), InvalidArgument);
    EXPECT_THROW(override_patch("train..steps=3"), InvalidArgument);
    const auto cfg = load_config(std::nullopt, {"train.steps=7", "sampler.g_s=2"});
    EXPECT_EQ(cfg["train"]["steps"], 7);
    EXPECT_EQ(cfg["sampler"]["g_s"], 2.0);
}

TEST(Config, HashCoversPipelineSectionsOnly) {
    const auto base = config_hash(default_config());
    EXPECT_EQ(base.size(), 16u);
    EXPECT_NE(config_hash(merge_config({{"train", {{"steps", 10}}}})), base);
    EXPECT_NE(config_hash(merge_config({{"corpus", {{"mode", "render"}}}})), base);
    EXPECT_EQ(config_hash(merge_config({{"sampler", {{"g_s", 1.0}}}})), base);
    EXPECT_EQ(config_hash(merge_config({{"serve", {{"port", 9000}}}})), base);
    EXPECT_EQ(config_hash(merge_config({{"paths", {{"runs", "/elsewhere"}}}})), base);
}

TEST(Config, TypedViews) {
    const auto cfg = default_config();
    EXPECT_EQ(corpus_config(cfg).mode, corpus::Mode::linear);
    EXPECT_EQ(latent_dim(cfg), 13);
    EXPECT_EQ(mine_params(cfg).k, 50u);
    EXPECT_EQ(schedule(cfg).T, 50);
    EXPECT_EQ(model_config(cfg).latent_dim, 13);
    EXPECT_EQ(train_config(cfg).drop_p, 0.3);
    EXPECT_EQ(sampler_settings(cfg).lambda, 20);
    EXPECT_EQ(eval_settings(cfg).pairs, 200u);
    EXPECT_THROW(mine_params(merge_config({{"mine", {{"threshold_mode", "median"}}}})), InvalidArgument);
    EXPECT_THROW(mine_params(merge_config({{"mine", {{"k", 0}}}})), InvalidArgument);
    EXPECT_THROW(train_config(merge_config({{"train", {{"drop_p", 2.0}}}})), InvalidArgument);
    EXPECT_THROW(corpus_config(merge_config({{"corpus", {{"mode", "audio"}}}})), InvalidArgument);
    EXPECT_THROW(eval_settings(merge_config({{"eval", {{"pairs", -1}}}})), InvalidArgument);
}
