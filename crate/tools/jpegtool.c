/*
 * Small libjpeg helper used to prepare test fixtures.
 *
 *   jpegtool dump <in.jpg> <out.coef>
 *       Writes the quantized DCT coefficients exactly as libjpeg decodes them.
 *       Layout (little-endian): u32 n_components, then per component
 *       u32 id, u32 blocks_v, u32 blocks_h, followed by blocks_v*blocks_h*64
 *       i16 values in natural (row-major) order, blocks in raster order.
 *       Block counts are the padded MCU-aligned counts.
 *
 *   jpegtool encode <in.pnm> <out.jpg> <quality> <sampling> <restart>
 *       sampling: "444" or "420" (ignored for grayscale input).
 *       restart: restart interval in MCUs (0 = none).
 */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <stdint.h>
#include <jpeglib.h>

static void put_u32(FILE *f, uint32_t v) {
    unsigned char b[4] = {v & 0xff, (v >> 8) & 0xff, (v >> 16) & 0xff, (v >> 24) & 0xff};
    fwrite(b, 1, 4, f);
}

static int dump(const char *in, const char *out) {
    FILE *fi = fopen(in, "rb");
    if (!fi) return 1;
    struct jpeg_decompress_struct cinfo;
    struct jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fi);
    jpeg_read_header(&cinfo, TRUE);
    jvirt_barray_ptr *coefs = jpeg_read_coefficients(&cinfo);
    FILE *fo = fopen(out, "wb");
    if (!fo) return 1;
    put_u32(fo, cinfo.num_components);
    for (int c = 0; c < cinfo.num_components; c++) {
        jpeg_component_info *ci = &cinfo.comp_info[c];
        /* padded to whole MCUs */
        uint32_t bh = cinfo.MCUs_per_row * ci->h_samp_factor;
        uint32_t bv = cinfo.total_iMCU_rows * ci->v_samp_factor;
        if (cinfo.num_components == 1) {
            bh = ci->width_in_blocks;
            bv = ci->height_in_blocks;
        }
        put_u32(fo, ci->component_id);
        put_u32(fo, bv);
        put_u32(fo, bh);
        for (uint32_t r = 0; r < bv; r++) {
            JBLOCKARRAY rows = (*cinfo.mem->access_virt_barray)((j_common_ptr)&cinfo, coefs[c], r, 1, FALSE);
            for (uint32_t b = 0; b < bh; b++) {
                for (int k = 0; k < 64; k++) {
                    int16_t v = rows[0][b][k];
                    unsigned char bb[2] = {v & 0xff, (v >> 8) & 0xff};
                    fwrite(bb, 1, 2, fo);
                }
            }
        }
    }
    fclose(fo);
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    fclose(fi);
    return 0;
}

static int encode(const char *in, const char *out, int quality, const char *sampling, int restart) {
    FILE *fi = fopen(in, "rb");
    if (!fi) return 1;
    char magic[3] = {0};
    int w, h, maxv;
    if (fscanf(fi, "%2s %d %d %d", magic, &w, &h, &maxv) != 4) return 1;
    fgetc(fi);
    int comps = strcmp(magic, "P6") == 0 ? 3 : 1;
    unsigned char *pix = malloc((size_t)w * h * comps);
    if (fread(pix, 1, (size_t)w * h * comps, fi) != (size_t)w * h * comps) return 1;
    fclose(fi);

    struct jpeg_compress_struct cinfo;
    struct jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_compress(&cinfo);
    FILE *fo = fopen(out, "wb");
    jpeg_stdio_dest(&cinfo, fo);
    cinfo.image_width = w;
    cinfo.image_height = h;
    cinfo.input_components = comps;
    cinfo.in_color_space = comps == 3 ? JCS_RGB : JCS_GRAYSCALE;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    if (comps == 3) {
        int f = strcmp(sampling, "420") == 0 ? 2 : 1;
        cinfo.comp_info[0].h_samp_factor = f;
        cinfo.comp_info[0].v_samp_factor = f;
        cinfo.comp_info[1].h_samp_factor = 1;
        cinfo.comp_info[1].v_samp_factor = 1;
        cinfo.comp_info[2].h_samp_factor = 1;
        cinfo.comp_info[2].v_samp_factor = 1;
    }
    cinfo.restart_interval = restart;
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = pix + (size_t)cinfo.next_scanline * w * comps;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    fclose(fo);
    free(pix);
    return 0;
}

int main(int argc, char **argv) {
    if (argc == 4 && strcmp(argv[1], "dump") == 0) return dump(argv[2], argv[3]);
    if (argc == 7 && strcmp(argv[1], "encode") == 0)
        return encode(argv[2], argv[3], atoi(argv[4]), argv[5], atoi(argv[6]));
    fprintf(stderr, "usage: jpegtool dump <in.jpg> <out.coef> | encode <in.pnm> <out.jpg> <q> <444|420> <restart>\n");
    return 2;
}
